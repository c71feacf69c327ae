//! Shared helpers for the integration tests: brute-force reference
//! implementations, random instance builders, and a finite-difference
//! gradient checker.

#![allow(dead_code)]

use pairseg::autodiff::{Tape, Var};
use pairseg::datamodel::{Dims, LabelMap, Mask, Volume, UNIT_SPACING};
use pairseg::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn rand_bools(rng: &mut impl Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

pub fn volume(dims: Dims, data: Vec<f32>) -> Volume {
    Volume::new(dims, UNIT_SPACING, data).unwrap()
}

pub fn rand_volume(rng: &mut impl Rng, dims: Dims) -> Volume {
    volume(dims, (0..dims.len()).map(|_| rng.random::<f32>()).collect())
}

pub fn rand_labels(rng: &mut impl Rng, dims: Dims, m: usize) -> LabelMap {
    LabelMap::new(dims, UNIT_SPACING, (0..dims.len()).map(|_| rng.random_range(0..m as u8)).collect(), m).unwrap()
}

pub fn rand_mask(rng: &mut impl Rng, dims: Dims) -> Mask {
    Mask::new(dims, (0..dims.len()).map(|_| rng.random_range(0..2u8)).collect()).unwrap()
}

/// Reference implementations written as plain loops over the definitions.
pub mod oracle {
    use pairseg::datamodel::Dims;

    pub type Mat = Vec<Vec<f64>>;

    pub fn rows(data: &[f64], r: usize, c: usize) -> Mat {
        (0..r).map(|i| data[i * c..(i + 1) * c].to_vec()).collect()
    }

    pub fn similarity(g: &Mat, mu: f64) -> Mat {
        let n = g.len();
        let dot = |i: usize, j: usize| -> f64 {
            let mut s = 0.0;
            for k in 0..g[i].len() {
                s += g[i][k] * g[j][k];
            }
            s
        };
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                max = max.max(dot(i, j));
            }
        }
        (0..n).map(|i| (0..n).map(|j| dot(i, j) - max / mu).collect()).collect()
    }

    pub fn alignment(a: &Mat, b: &Mat) -> f64 {
        let n = a.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += (a[i][j] - b[i][j]).abs();
            }
        }
        s / (n * n) as f64
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    /// `relu(adj G W)`, with `adj = A` or its row-wise softmax.
    pub fn gcn(a: &Mat, g: &Mat, w: &Mat, softmax_rows: bool) -> Mat {
        let n = a.len();
        let adj: Mat = if softmax_rows { a.iter().map(|r| softmax(r)).collect() } else { a.clone() };
        let (d_in, d_out) = (w.len(), w[0].len());
        let mut out = vec![vec![0.0; d_out]; n];
        for i in 0..n {
            for o in 0..d_out {
                let mut s = 0.0;
                for j in 0..n {
                    for k in 0..d_in {
                        s += adj[i][j] * g[j][k] * w[k][o];
                    }
                }
                out[i][o] = s.max(0.0);
            }
        }
        out
    }

    /// `-sum_i sum_j A_ij sum_k C_ik C_jk`.
    pub fn clustering(a: &Mat, c: &Mat) -> f64 {
        let n = a.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut cc = 0.0;
                for k in 0..c[0].len() {
                    cc += c[i][k] * c[j][k];
                }
                s += a[i][j] * cc;
            }
        }
        -s
    }

    pub fn dice(p: &[bool], g: &[bool]) -> f64 {
        let i = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
        let (np, ng) = (p.iter().filter(|v| **v).count(), g.iter().filter(|v| **v).count());
        if np + ng == 0 {
            1.0
        } else {
            2.0 * i as f64 / (np + ng) as f64
        }
    }

    pub fn jaccard(p: &[bool], g: &[bool]) -> f64 {
        let i = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
        let u = p.iter().zip(g).filter(|(a, b)| **a || **b).count();
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }

    fn coords(dims: Dims) -> Vec<[i64; 3]> {
        let [d, h, w] = dims.dhw();
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out.push([z as i64, y as i64, x as i64]);
                }
            }
        }
        out
    }

    /// Mask voxels with a face neighbour that is background or off-raster.
    pub fn surface(m: &[bool], dims: Dims) -> Vec<[i64; 3]> {
        let [d, h, w] = dims.dhw();
        let ext = [d as i64, h as i64, w as i64];
        let mut steps = vec![[0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
        if dims.rank() == 3 {
            steps.extend([[1, 0, 0], [-1, 0, 0]]);
        }
        let cs = coords(dims);
        let at = |c: [i64; 3]| -> bool {
            if (0..3).any(|a| c[a] < 0 || c[a] >= ext[a]) {
                return false;
            }
            m[((c[0] * ext[1] + c[1]) * ext[2] + c[2]) as usize]
        };
        cs.into_iter()
            .filter(|&c| at(c) && steps.iter().any(|s| !at([c[0] + s[0], c[1] + s[1], c[2] + s[2]])))
            .collect()
    }

    /// All-pairs nearest distances, `P -> G` then `G -> P`.
    pub fn distances(p: &[bool], g: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
        let (sp, sg) = (surface(p, dims), surface(g, dims));
        let nearest = |from: &[[i64; 3]], to: &[[i64; 3]]| -> Vec<f64> {
            from.iter()
                .map(|a| {
                    to.iter()
                        .map(|b| {
                            (0..3)
                                .map(|k| ((a[k] - b[k]) as f64 * spacing[k]).powi(2))
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect()
        };
        let mut all = nearest(&sp, &sg);
        all.extend(nearest(&sg, &sp));
        all
    }

    pub fn hd95(p: &[bool], g: &[bool], dims: Dims, spacing: [f64; 3]) -> f64 {
        let mut d = distances(p, g, dims, spacing);
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pos = 0.95 * (d.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        d[lo] * (1.0 - (pos - lo as f64)) + d[hi] * (pos - lo as f64)
    }

    pub fn asd(p: &[bool], g: &[bool], dims: Dims, spacing: [f64; 3]) -> f64 {
        let d = distances(p, g, dims, spacing);
        d.iter().sum::<f64>() / d.len() as f64
    }
}

/// Builds a scalar from `inputs` (all leaves on `tape`) and returns it.
pub type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Worst relative error, over all inputs, between the tape gradient and a
/// central difference with step `h`. Per input the error is
/// `|analytic - numeric| / max(|numeric|, floor)` over the whole tensor.
pub fn gradient_error(inputs: &[Tensor], build: &Build<'_>, h: f64) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars);
    let mut grads = tape.backward(out);
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.take(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        let mut diff2 = 0.0;
        let mut num2 = 0.0;
        for i in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            diff2 += (analytic.data()[i] - numeric).powi(2);
            num2 += numeric * numeric;
        }
        worst = worst.max(diff2.sqrt() / num2.sqrt().max(1e-6));
    }
    worst
}
