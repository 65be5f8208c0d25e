//! Writes a planted rank-deficient checkpoint, and optionally the matching
//! regression dataset, for exercising the `nullora` pipeline.
//!
//! Usage:
//!   cargo run --example make_planted -- <d_out> <d_in> <nullity> <n_samples> <seed> <ckpt.nlrt> [task.nlrt]

use std::path::Path;
use std::process::exit;

use nullora::io::{write_tensor_file, Dtype, TensorFile};
use nullora::training::gen_planted_task;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 6 || args.len() > 7 {
        eprintln!(
            "usage: make_planted <d_out> <d_in> <nullity> <n_samples> <seed> <ckpt.nlrt> [task.nlrt]"
        );
        exit(1);
    }
    let parse = |i: usize| -> u64 {
        args[i].parse().unwrap_or_else(|_| {
            eprintln!("not an integer: {}", args[i]);
            exit(1);
        })
    };
    let (d_out, d_in, nullity, n_samples, seed) = (
        parse(0) as usize,
        parse(1) as usize,
        parse(2) as usize,
        parse(3) as usize,
        parse(4),
    );

    let task = gen_planted_task(d_out, d_in, nullity, n_samples, seed).unwrap_or_else(|e| {
        eprintln!("{e}");
        exit(1);
    });

    let mut ckpt = TensorFile::new();
    ckpt.insert("layer0", Dtype::F64, task.w0).unwrap();
    write_tensor_file(Path::new(&args[5]), &ckpt).unwrap();
    println!("wrote checkpoint {}", args[5]);

    if let Some(task_path) = args.get(6) {
        let mut data = TensorFile::new();
        data.insert("inputs", Dtype::F64, task.inputs).unwrap();
        data.insert("targets", Dtype::F64, task.targets).unwrap();
        write_tensor_file(Path::new(task_path), &data).unwrap();
        println!("wrote dataset {task_path}");
    }
}
