//! Helpers shared by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use minmax_wsl::autodiff::{Graph, Tensor, Var};
use minmax_wsl::evaluation::sha256_hex;
use rand::Rng;

pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Symmetric relative error with an absolute floor for near-zero gradients.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Analytic and central-difference gradients of a scalar function with
/// respect to every entry of every input.
pub struct GradCheck {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn run(inputs: &[Tensor], h: f64, f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> Self {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        let analytic = vars.iter().map(|v| g.grad(*v).to_vec()).collect();

        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.scalar(out)
        };
        let mut work = inputs.to_vec();
        let numeric = (0..inputs.len())
            .map(|i| {
                (0..inputs[i].numel())
                    .map(|j| {
                        let orig = work[i].data()[j];
                        work[i].data_mut()[j] = orig + h;
                        let up = eval(&work);
                        work[i].data_mut()[j] = orig - h;
                        let down = eval(&work);
                        work[i].data_mut()[j] = orig;
                        (up - down) / (2.0 * h)
                    })
                    .collect()
            })
            .collect();
        Self { analytic, numeric }
    }

    pub fn max_rel_err(&self, floor: f64) -> f64 {
        self.analytic
            .iter()
            .flatten()
            .zip(self.numeric.iter().flatten())
            .map(|(a, n)| rel_err(*a, *n, floor))
            .fold(0.0, f64::max)
    }
}

/// Relative path to SHA-256 of every file below `root`.
pub fn tree_hash(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, sha256_hex(&fs::read(&path).unwrap()));
            }
        }
    }
    out
}

/// Writes straight to stderr so the line shows even when output is captured.
pub fn announce(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}
