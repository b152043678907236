//! Fitness sources for coefficient search: an external-command scorer for
//! real models and a seeded synthetic benchmark whose losses have closed
//! forms.
//!
//! The synthetic suite draws a pretrained vector θ_pre of shape [D] and n
//! sparse task deltas τ_i, each nonzero on a support of ⌈s·D⌉ coordinates.
//! Supports are disjoint at overlap 0, identical at overlap 1, and drawn
//! from a shared pool sized so the expected pairwise intersection fraction
//! matches `overlap` in between. Task i's optimum is θ_pre + τ_i, and its
//! loss for a merged model is the squared error over its own support.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::baselines::trim_keep_count;
use crate::checkpoint::{Checkpoint, Dtype, Tensor};
use crate::error::{Error, Result};
use crate::task_vector::validate_compatibility;

/// Tensor name used by synthetic suites.
pub const SYNTHETIC_TENSOR: &str = "weights";

/// Shell command evaluated as a fitness function: `{checkpoint}` is replaced
/// by the model path, and the score is parsed from standard output.
#[derive(Debug, Clone)]
pub struct ExternalEvaluator {
    pub command_template: String,
    pub timeout_seconds: u64,
    pub working_dir: Option<PathBuf>,
}

impl ExternalEvaluator {
    pub fn validate(&self) -> Result<()> {
        let count = self.command_template.matches("{checkpoint}").count();
        if count != 1 {
            return Err(Error::InvalidConfig(format!(
                "command template must contain {{checkpoint}} exactly once, found {count}"
            )));
        }
        Ok(())
    }
}

/// Scans stdout from the end for `score: <float>` or a bare float line.
fn parse_score(stdout: &str) -> Option<f32> {
    for line in stdout.lines().rev() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("score:") {
            if let Ok(v) = rest.trim().parse::<f32>() {
                return Some(v);
            }
        }
        if let Ok(v) = line.parse::<f32>() {
            return Some(v);
        }
    }
    None
}

fn drain_pipe<R: Read + Send + 'static>(pipe: R) -> std::thread::JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut buf = Vec::new();
        let mut pipe = pipe;
        let _ = pipe.read_to_end(&mut buf);
        buf
    })
}

/// Runs the evaluator on one checkpoint file and returns its score.
///
/// Output pipes are drained on their own threads while the process is
/// polled, so a chatty command cannot deadlock on a full pipe buffer.
pub fn evaluate_external(ev: &ExternalEvaluator, checkpoint_path: &Path) -> Result<f32> {
    ev.validate()?;
    if !checkpoint_path.exists() {
        return Err(Error::Io {
            path: checkpoint_path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let command = ev
        .command_template
        .replace("{checkpoint}", &checkpoint_path.to_string_lossy());

    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(&command)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = &ev.working_dir {
        cmd.current_dir(dir);
    }
    let mut child = cmd.spawn().map_err(|source| Error::Io {
        path: PathBuf::from("sh"),
        source,
    })?;
    let stdout_thread = drain_pipe(child.stdout.take().expect("piped"));
    let stderr_thread = drain_pipe(child.stderr.take().expect("piped"));

    let deadline = Instant::now() + Duration::from_secs(ev.timeout_seconds);
    let status = loop {
        match child.try_wait().map_err(|source| Error::Io {
            path: PathBuf::from("sh"),
            source,
        })? {
            Some(status) => break status,
            None if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(Error::Timeout(ev.timeout_seconds));
            }
            None => std::thread::sleep(Duration::from_millis(10)),
        }
    };
    let stdout = String::from_utf8_lossy(&stdout_thread.join().unwrap_or_default()).into_owned();
    let stderr = String::from_utf8_lossy(&stderr_thread.join().unwrap_or_default()).into_owned();

    if !status.success() {
        let tail: String = {
            let lines: Vec<&str> = stderr.lines().collect();
            let start = lines.len().saturating_sub(10);
            lines[start..].join("\n")
        };
        return Err(Error::NonZeroExit {
            code: status.code().unwrap_or(-1),
            stderr_tail: tail,
        });
    }
    parse_score(&stdout).ok_or_else(|| {
        let tail: String = stdout.chars().rev().take(200).collect::<String>();
        Error::UnparsableOutput(tail.chars().rev().collect())
    })
}

/// Seeded benchmark instance: one pretrained vector, n sparse task deltas,
/// and the per-task optima they define.
#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub pretrained: Checkpoint,
    pub task_checkpoints: Vec<Checkpoint>,
    pub task_optima: Vec<Vec<f32>>,
    pub dim: usize,
    pub sparsity: f32,
    pub overlap: f32,
    pub supports: Vec<Vec<usize>>,
    pub seed: u64,
}

fn single_tensor_checkpoint(values: &[f32]) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.insert(
        SYNTHETIC_TENSOR,
        Tensor::from_f32_vec(Dtype::F32, vec![values.len()], values).expect("length matches"),
    )
    .expect("fresh checkpoint");
    ckpt
}

/// Builds a suite with |support| = ⌈s·D⌉ per task. Draw order is fixed
/// (pretrained, then supports, then deltas), so a seed pins the suite.
pub fn gen_synthetic_suite(
    n: usize,
    d: usize,
    sparsity: f32,
    overlap: f32,
    seed: u64,
) -> Result<SyntheticSuite> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidConfig(
            "need at least one task and one coordinate".into(),
        ));
    }
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "sparsity must lie in (0, 1], got {sparsity}"
        )));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::InvalidConfig(format!(
            "overlap must lie in [0, 1], got {overlap}"
        )));
    }
    let m = trim_keep_count(d, sparsity);
    if overlap == 0.0 && n * m > d {
        return Err(Error::InfeasibleSupports(format!(
            "{n} disjoint supports of {m} coordinates do not fit in {d}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let pre: Vec<f32> = (0..d).map(|_| normal.sample(&mut rng)).collect();

    let supports: Vec<Vec<usize>> = if overlap == 0.0 {
        let all = rand::seq::index::sample(&mut rng, d, n * m).into_vec();
        all.chunks(m)
            .map(|chunk| {
                let mut s = chunk.to_vec();
                s.sort_unstable();
                s
            })
            .collect()
    } else {
        // Each task draws m indices from a pool of ~m/overlap, giving an
        // expected pairwise intersection of overlap·m; overlap 1 shares
        // the whole pool.
        let pool_size = ((m as f64 / overlap as f64).ceil() as usize).clamp(m, d);
        let pool = rand::seq::index::sample(&mut rng, d, pool_size).into_vec();
        (0..n)
            .map(|_| {
                let mut s: Vec<usize> = rand::seq::index::sample(&mut rng, pool_size, m)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                s.sort_unstable();
                s
            })
            .collect()
    };

    let mut task_checkpoints = Vec::with_capacity(n);
    let mut task_optima = Vec::with_capacity(n);
    for support in &supports {
        let mut theta = pre.clone();
        for &idx in support {
            let mut delta = 0.0f32;
            while delta == 0.0 {
                delta = 3.0 * rng.sample::<f32, _>(normal);
            }
            theta[idx] += delta;
        }
        task_checkpoints.push(single_tensor_checkpoint(&theta));
        task_optima.push(theta);
    }

    Ok(SyntheticSuite {
        pretrained: single_tensor_checkpoint(&pre),
        task_checkpoints,
        task_optima,
        dim: d,
        sparsity,
        overlap,
        supports,
        seed,
    })
}

/// Per-task squared error over each task's own support, plus the mean.
/// Fitness for search is the negated mean.
pub fn score_synthetic(suite: &SyntheticSuite, merged: &Checkpoint) -> Result<(Vec<f32>, f32)> {
    validate_compatibility(&[&suite.pretrained, merged], false)?;
    let theta = merged
        .get(SYNTHETIC_TENSOR)
        .ok_or_else(|| Error::SchemaMismatch(format!("missing tensor \"{SYNTHETIC_TENSOR}\"")))?
        .to_f32_vec();
    let mut per_task = Vec::with_capacity(suite.supports.len());
    let mut total = 0.0f64;
    for (support, optimum) in suite.supports.iter().zip(&suite.task_optima) {
        let mut loss = 0.0f64;
        for &idx in support {
            let diff = theta[idx] as f64 - optimum[idx] as f64;
            loss += diff * diff;
        }
        total += loss;
        per_task.push(loss as f32);
    }
    let mean = (total / per_task.len() as f64) as f32;
    Ok((per_task, mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::average_merge;
    use crate::pcb::{pcb_merge, PcbConfig};

    #[test]
    fn parses_score_prefix_and_bare_float() {
        assert_eq!(parse_score("score: 0.73"), Some(0.73));
        assert_eq!(parse_score("loading\nevaluating\n0.5\n"), Some(0.5));
        assert_eq!(parse_score("score: 0.9\ncleanup done"), Some(0.9));
        assert_eq!(parse_score("score:-1.25e-3"), Some(-1.25e-3));
        assert_eq!(parse_score("no numbers here"), None);
        assert_eq!(parse_score(""), None);
    }

    fn tmp_checkpoint() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        single_tensor_checkpoint(&[1.0, 2.0]).save(&path).unwrap();
        (dir, path)
    }

    #[test]
    fn external_scorer_roundtrip() {
        let (_dir, path) = tmp_checkpoint();
        let ev = ExternalEvaluator {
            command_template: "test -f {checkpoint} && echo 'score: 0.73'".into(),
            timeout_seconds: 10,
            working_dir: None,
        };
        assert_eq!(evaluate_external(&ev, &path).unwrap(), 0.73);
    }

    #[test]
    fn external_scorer_takes_last_bare_float() {
        let (_dir, path) = tmp_checkpoint();
        let ev = ExternalEvaluator {
            command_template: "echo loading {checkpoint}; echo 0.25; echo 0.5".into(),
            timeout_seconds: 10,
            working_dir: None,
        };
        assert_eq!(evaluate_external(&ev, &path).unwrap(), 0.5);
    }

    #[test]
    fn external_scorer_reports_nonzero_exit() {
        let (_dir, path) = tmp_checkpoint();
        let ev = ExternalEvaluator {
            command_template: "echo {checkpoint}; echo boom >&2; exit 3".into(),
            timeout_seconds: 10,
            working_dir: None,
        };
        match evaluate_external(&ev, &path) {
            Err(Error::NonZeroExit { code, stderr_tail }) => {
                assert_eq!(code, 3);
                assert!(stderr_tail.contains("boom"));
            }
            other => panic!("expected NonZeroExit, got {other:?}"),
        }
    }

    #[test]
    fn external_scorer_times_out() {
        let (_dir, path) = tmp_checkpoint();
        let ev = ExternalEvaluator {
            command_template: "sleep 30; echo {checkpoint}".into(),
            timeout_seconds: 1,
            working_dir: None,
        };
        let start = Instant::now();
        assert!(matches!(evaluate_external(&ev, &path), Err(Error::Timeout(1))));
        assert!(start.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn external_scorer_rejects_unparsable_output() {
        let (_dir, path) = tmp_checkpoint();
        let ev = ExternalEvaluator {
            command_template: "echo evaluated {checkpoint}".into(),
            timeout_seconds: 10,
            working_dir: None,
        };
        assert!(matches!(
            evaluate_external(&ev, &path),
            Err(Error::UnparsableOutput(_))
        ));
    }

    #[test]
    fn template_must_contain_placeholder_once() {
        for template in ["echo 1.0", "echo {checkpoint} {checkpoint}"] {
            let ev = ExternalEvaluator {
                command_template: template.into(),
                timeout_seconds: 1,
                working_dir: None,
            };
            assert!(ev.validate().is_err());
        }
    }

    #[test]
    fn disjoint_suite_has_disjoint_supports() {
        let suite = gen_synthetic_suite(2, 10, 0.2, 0.0, 0).unwrap();
        assert_eq!(suite.supports.len(), 2);
        for s in &suite.supports {
            assert_eq!(s.len(), 2);
        }
        let overlap: Vec<usize> = suite.supports[0]
            .iter()
            .filter(|i| suite.supports[1].contains(i))
            .copied()
            .collect();
        assert!(overlap.is_empty());
    }

    #[test]
    fn suite_generation_is_deterministic() {
        let a = gen_synthetic_suite(3, 64, 0.1, 0.5, 9).unwrap();
        let b = gen_synthetic_suite(3, 64, 0.1, 0.5, 9).unwrap();
        assert_eq!(a.supports, b.supports);
        assert_eq!(a.task_optima, b.task_optima);
        assert_eq!(
            a.pretrained.get(SYNTHETIC_TENSOR).unwrap().raw_data(),
            b.pretrained.get(SYNTHETIC_TENSOR).unwrap().raw_data()
        );
    }

    #[test]
    fn full_overlap_shares_one_support() {
        let suite = gen_synthetic_suite(3, 32, 0.25, 1.0, 4).unwrap();
        for s in &suite.supports[1..] {
            assert_eq!(s, &suite.supports[0]);
        }
    }

    #[test]
    fn deltas_are_nonzero_exactly_on_support() {
        let suite = gen_synthetic_suite(2, 40, 0.1, 0.0, 11).unwrap();
        let pre = suite.pretrained.get(SYNTHETIC_TENSOR).unwrap().to_f32_vec();
        for (ckpt, support) in suite.task_checkpoints.iter().zip(&suite.supports) {
            let theta = ckpt.get(SYNTHETIC_TENSOR).unwrap().to_f32_vec();
            for (idx, (t, p)) in theta.iter().zip(&pre).enumerate() {
                if support.contains(&idx) {
                    assert_ne!(t, p, "coordinate {idx} should differ");
                } else {
                    assert_eq!(t, p, "coordinate {idx} should match pretrained");
                }
            }
        }
    }

    #[test]
    fn infeasible_disjoint_supports_are_rejected() {
        assert!(matches!(
            gen_synthetic_suite(4, 10, 0.5, 0.0, 0),
            Err(Error::InfeasibleSupports(_))
        ));
    }

    #[test]
    fn own_checkpoint_scores_zero_loss() {
        let suite = gen_synthetic_suite(2, 50, 0.1, 0.0, 3).unwrap();
        let (losses, _) = score_synthetic(&suite, &suite.task_checkpoints[0]).unwrap();
        assert_eq!(losses[0], 0.0);
        assert!(losses[1] > 0.0);
    }

    #[test]
    fn pretrained_scores_delta_norms() {
        let suite = gen_synthetic_suite(2, 50, 0.1, 0.0, 5).unwrap();
        let (losses, mean) = score_synthetic(&suite, &suite.pretrained).unwrap();
        let pre = suite.pretrained.get(SYNTHETIC_TENSOR).unwrap().to_f32_vec();
        for ((support, optimum), loss) in suite
            .supports
            .iter()
            .zip(&suite.task_optima)
            .zip(&losses)
        {
            let norm_sq: f64 = support
                .iter()
                .map(|&i| (optimum[i] as f64 - pre[i] as f64).powi(2))
                .sum();
            assert!((norm_sq - *loss as f64).abs() <= 1e-6 * norm_sq.max(1.0));
        }
        let expect = losses.iter().map(|l| *l as f64).sum::<f64>() / losses.len() as f64;
        assert!((mean as f64 - expect).abs() <= 1e-6 * expect.max(1.0));
    }

    #[test]
    fn competition_merge_is_exact_on_disjoint_suites() {
        for n in [2usize, 4] {
            let suite = gen_synthetic_suite(n, 1024, 0.05, 0.0, 17).unwrap();
            let fts: Vec<&Checkpoint> = suite.task_checkpoints.iter().collect();
            let cfg = PcbConfig {
                mask_ratio: suite.sparsity,
                ..PcbConfig::default()
            };
            let merged = pcb_merge(&suite.pretrained, &fts, &cfg).unwrap();
            let (_, mean) = score_synthetic(&suite, &merged).unwrap();
            assert!(mean <= 1e-10, "n={n} mean loss {mean}");

            let avg = average_merge(&fts).unwrap();
            let (_, avg_mean) = score_synthetic(&suite, &avg).unwrap();
            assert!(avg_mean > mean.max(1e-6), "averaging should be worse");
        }
    }
}
