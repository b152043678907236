//! The bench subcommand: score merging methods on seeded synthetic suites
//! and report an aligned table plus a CSV file.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rayon::prelude::*;

use super::merge::merge_loaded;
use super::{parse_granularity, Method, MergeRecipe};
use crate::error::{Error, Result};
use crate::eval::{gen_synthetic_suite, score_synthetic};
use crate::pcb::Granularity;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Task counts to benchmark, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    n: Vec<usize>,
    /// Coordinates per suite.
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// Support fraction s per task.
    #[arg(long, default_value_t = 0.05)]
    sparsity: f32,
    /// Expected pairwise support overlap in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    overlap: f32,
    /// Suite seeds, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Methods to compare.
    #[arg(
        long,
        value_delimiter = ',',
        value_enum,
        default_value = "pcb,task-arithmetic,ties,average"
    )]
    methods: Vec<Method>,
    /// CSV output path.
    #[arg(long, default_value = "bench.csv")]
    csv: PathBuf,
    /// Concurrent suite evaluations (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Scale on the fused delta (default 1).
    #[arg(long, default_value_t = 1.0)]
    lambda: f32,
    /// Mask ratio r / trim fraction k (default: the suite sparsity).
    #[arg(long)]
    ratio: Option<f32>,
    /// Score/mask unit: per-tensor or global.
    #[arg(long, value_parser = parse_granularity)]
    granularity: Option<Granularity>,
}

#[derive(Debug, Clone)]
struct Row {
    method: Method,
    seed: u64,
    n: usize,
    mean_loss: f32,
    per_task: Vec<f32>,
    wall_ms: u64,
}

fn cell_recipe(args: &BenchArgs, method: Method) -> MergeRecipe {
    let ratio = args.ratio.unwrap_or(args.sparsity);
    MergeRecipe {
        method,
        pretrained: None,
        models: Vec::new(),
        out: PathBuf::new(),
        lambda: args.lambda,
        per_task_lambdas: None,
        ratio,
        trim: ratio,
        granularity: args.granularity.unwrap_or(Granularity::PerTensor),
        regulator_n: None,
        enable_intra: true,
        enable_inter: true,
        enable_drop: true,
        enable_rescale: true,
        inter_norm: true,
        dare: None,
        seed: 0,
        dump_scores: false,
    }
}

fn run_cell(args: &BenchArgs, method: Method, n: usize, seed: u64) -> Result<Row> {
    let suite = gen_synthetic_suite(n, args.dim, args.sparsity, args.overlap, seed)?;
    let recipe = cell_recipe(args, method);
    recipe.validate_params()?;
    let started = Instant::now();
    let (merged, _) = merge_loaded(
        &recipe,
        Some(&suite.pretrained),
        &suite.task_checkpoints,
        false,
    )?;
    let (per_task, mean_loss) = score_synthetic(&suite, &merged)?;
    Ok(Row {
        method,
        seed,
        n,
        mean_loss,
        per_task,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

fn write_csv(args: &BenchArgs, rows: &[Row]) -> Result<()> {
    let mut csv = String::from("method,seed,n,D,s,overlap,mean_loss,per_task_losses,wall_ms\n");
    for row in rows {
        let per_task = row
            .per_task
            .iter()
            .map(|l| format!("{l:e}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            csv,
            "{},{},{},{},{},{},{:e},\"{}\",{}",
            row.method.name(),
            row.seed,
            row.n,
            args.dim,
            args.sparsity,
            args.overlap,
            row.mean_loss,
            per_task,
            row.wall_ms
        )
        .expect("string write");
    }
    std::fs::write(&args.csv, csv).map_err(|source| Error::Io {
        path: args.csv.clone(),
        source,
    })
}

fn print_table(rows: &[Row]) {
    let header = ["method", "n", "seed", "mean_loss", "wall_ms"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.method.name().to_string(),
                r.n.to_string(),
                r.seed.to_string(),
                format!("{:.6e}", r.mean_loss),
                r.wall_ms.to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            cells
                .iter()
                .map(|row| row[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cols: &[String]| {
        cols.iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", line(&header.map(String::from)));
    for row in &cells {
        println!("{}", line(row));
    }
}

pub fn run(args: BenchArgs) -> Result<()> {
    if args.n.is_empty() || args.seeds.is_empty() || args.methods.is_empty() {
        return Err(Error::InvalidConfig(
            "bench needs at least one n, seed, and method".into(),
        ));
    }
    let mut cells: Vec<(Method, usize, u64)> = Vec::new();
    for &m in &args.methods {
        for &n in &args.n {
            for &s in &args.seeds {
                cells.push((m, n, s));
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let mut rows: Vec<Row> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(m, n, s)| run_cell(&args, m, n, s))
            .collect::<Result<Vec<_>>>()
    })?;
    rows.sort_by(|a, b| {
        a.method
            .name()
            .cmp(b.method.name())
            .then(a.n.cmp(&b.n))
            .then(a.seed.cmp(&b.seed))
    });

    print_table(&rows);
    write_csv(&args, &rows)?;
    eprintln!("wrote {}", args.csv.display());
    Ok(())
}
