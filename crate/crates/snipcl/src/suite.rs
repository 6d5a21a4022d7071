//! Finite-difference gradient suite: every differentiable tape operation
//! and both composite contrastive losses, checked against central
//! differences on randomized small fixtures.

use rand::Rng;

use crate::encoder::GraphAdjacency;
use crate::pretrain::{dense_contrastive_loss, info_nce, total_loss, MemoryBank};
use crate::rng::{stream, RngStream};
use crate::tensor::{grad_check, grad_check_multi, Padding, Tensor, TensorError};

/// Step size for the central differences.
pub const GRAD_H: f64 = 1e-5;
/// Maximum accepted relative error.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteReport {
    pub seeds: usize,
    pub results: Vec<GradCheckResult>,
}

impl GradSuiteReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    /// One line per check, suitable for terminal output.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!(
                "{}: max_rel_err={:.3e} [{}]\n",
                r.name,
                r.max_rel_err,
                if r.pass { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

fn rt(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random tensor with entries bounded away from zero, for operations with
/// kinks or normalization at the origin.
fn rt_off(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn padding_for(rng: &mut RngStream) -> Padding {
    if rng.gen_bool(0.5) {
        Padding::Same
    } else {
        Padding::Valid
    }
}

type Check = (&'static str, fn(&mut RngStream) -> Result<f64, TensorError>);

fn checks() -> Vec<Check> {
    vec![
        ("add", |rng| {
            let (a, b) = (rt(rng, &[3, 4]), rt(rng, &[3, 4]));
            grad_check_multi(
                |t, v| {
                    let s = t.add(v[0], v[1])?;
                    Ok(t.sum_all(s))
                },
                &[a, b],
                GRAD_H,
            )
        }),
        ("sub", |rng| {
            let (a, b) = (rt(rng, &[3, 4]), rt(rng, &[3, 4]));
            grad_check_multi(
                |t, v| {
                    let s = t.sub(v[0], v[1])?;
                    Ok(t.sum_all(s))
                },
                &[a, b],
                GRAD_H,
            )
        }),
        ("mul", |rng| {
            let (a, b) = (rt(rng, &[3, 4]), rt(rng, &[3, 4]));
            grad_check_multi(
                |t, v| {
                    let s = t.mul(v[0], v[1])?;
                    Ok(t.sum_all(s))
                },
                &[a, b],
                GRAD_H,
            )
        }),
        ("scale", |rng| {
            let a = rt(rng, &[5]);
            let c = rng.gen_range(-2.0..2.0);
            grad_check(
                move |t, v| {
                    let s = t.scale(v, c);
                    Ok(t.sum_all(s))
                },
                &a,
                GRAD_H,
            )
        }),
        ("relu", |rng| {
            let a = rt_off(rng, &[4, 3]);
            grad_check(
                |t, v| {
                    let r = t.relu(v);
                    let sq = t.mul(r, r)?;
                    Ok(t.sum_all(sq))
                },
                &a,
                GRAD_H,
            )
        }),
        ("reshape", |rng| {
            let a = rt(rng, &[2, 6]);
            grad_check(
                |t, v| {
                    let r = t.reshape(v, vec![3, 4])?;
                    let sq = t.mul(r, r)?;
                    Ok(t.sum_all(sq))
                },
                &a,
                GRAD_H,
            )
        }),
        ("matmul", |rng| {
            let (a, b) = (rt(rng, &[3, 4]), rt(rng, &[4, 2]));
            grad_check_multi(
                |t, v| {
                    let m = t.matmul(v[0], v[1])?;
                    let sq = t.mul(m, m)?;
                    Ok(t.sum_all(sq))
                },
                &[a, b],
                GRAD_H,
            )
        }),
        ("dot", |rng| {
            let (a, b) = (rt(rng, &[5]), rt(rng, &[5]));
            grad_check_multi(|t, v| t.dot(v[0], v[1]), &[a, b], GRAD_H)
        }),
        ("conv1d", |rng| {
            let (x, w) = (rt(rng, &[9, 3]), rt(rng, &[3, 3, 2]));
            let stride = rng.gen_range(1..=2);
            let pad = padding_for(rng);
            grad_check_multi(
                move |t, v| {
                    let c = t.conv1d(v[0], v[1], stride, pad)?;
                    let sq = t.mul(c, c)?;
                    Ok(t.sum_all(sq))
                },
                &[x, w],
                GRAD_H,
            )
        }),
        ("add_bias", |rng| {
            let (x, b) = (rt(rng, &[4, 3]), rt(rng, &[3]));
            grad_check_multi(
                |t, v| {
                    let s = t.add_bias(v[0], v[1])?;
                    let sq = t.mul(s, s)?;
                    Ok(t.sum_all(sq))
                },
                &[x, b],
                GRAD_H,
            )
        }),
        ("adaptive_avg_pool1d", |rng| {
            let x = rt(rng, &[9, 3]);
            let bins = rng.gen_range(1..=5);
            grad_check(
                move |t, v| {
                    let p = t.adaptive_avg_pool1d(v, bins)?;
                    let sq = t.mul(p, p)?;
                    Ok(t.sum_all(sq))
                },
                &x,
                GRAD_H,
            )
        }),
        ("upsample_linear", |rng| {
            let x = rt(rng, &[5, 3]);
            let t_out = rng.gen_range(5..=11);
            grad_check(
                move |t, v| {
                    let u = t.upsample_linear(v, t_out)?;
                    let sq = t.mul(u, u)?;
                    Ok(t.sum_all(sq))
                },
                &x,
                GRAD_H,
            )
        }),
        ("l2_normalize", |rng| {
            let x = rt_off(rng, &[4, 3]);
            grad_check(
                |t, v| {
                    let n = t.l2_normalize(v)?;
                    let sq = t.mul(n, n)?;
                    let w = t.scale(sq, 0.7);
                    Ok(t.sum_all(w))
                },
                &x,
                GRAD_H,
            )
        }),
        ("concat_channels", |rng| {
            let xs = [rt(rng, &[4, 2]), rt(rng, &[4, 3]), rt(rng, &[4, 1])];
            grad_check_multi(
                |t, v| {
                    let c = t.concat_channels(v)?;
                    let sq = t.mul(c, c)?;
                    Ok(t.sum_all(sq))
                },
                &xs,
                GRAD_H,
            )
        }),
        ("mean_axis0", |rng| {
            let x = rt(rng, &[5, 3]);
            grad_check(
                |t, v| {
                    let m = t.mean_axis0(v)?;
                    let sq = t.mul(m, m)?;
                    Ok(t.sum_all(sq))
                },
                &x,
                GRAD_H,
            )
        }),
        ("mean_axis1", |rng| {
            let x = rt(rng, &[4, 5, 2]);
            grad_check(
                |t, v| {
                    let m = t.mean_axis1(v)?;
                    let sq = t.mul(m, m)?;
                    Ok(t.sum_all(sq))
                },
                &x,
                GRAD_H,
            )
        }),
        ("mean_all", |rng| {
            let x = rt(rng, &[3, 4]);
            grad_check(
                |t, v| {
                    let sq = t.mul(v, v)?;
                    Ok(t.mean_all(sq))
                },
                &x,
                GRAD_H,
            )
        }),
        ("row_and_stack_scalars", |rng| {
            let x = rt(rng, &[3, 4]);
            grad_check(
                |t, v| {
                    let mut scalars = Vec::new();
                    for i in 0..3 {
                        let r = t.row(v, i)?;
                        let sq = t.mul(r, r)?;
                        scalars.push(t.mean_all(sq));
                    }
                    let s = t.stack_scalars(&scalars)?;
                    Ok(t.sum_all(s))
                },
                &x,
                GRAD_H,
            )
        }),
        ("logsumexp", |rng| {
            let x = rt(rng, &[6]);
            grad_check(|t, v| t.logsumexp(v), &x, GRAD_H)
        }),
        ("log_softmax_nll", |rng| {
            let x = rt(rng, &[4, 5]);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            grad_check(
                move |t, v| {
                    let lp = t.log_softmax_rows(v)?;
                    t.nll_mean(lp, &labels)
                },
                &x,
                GRAD_H,
            )
        }),
        ("graph_conv", |rng| {
            let adj = GraphAdjacency::lite_body(5);
            let (x, w) = (rt(rng, &[4, 5, 3]), rt(rng, &[3, 2]));
            grad_check_multi(
                move |t, v| {
                    let g = t.graph_conv(v[0], v[1], adj.matrix())?;
                    let sq = t.mul(g, g)?;
                    Ok(t.sum_all(sq))
                },
                &[x, w],
                GRAD_H,
            )
        }),
        ("temporal_conv_joints", |rng| {
            let (x, w) = (rt(rng, &[8, 3, 2]), rt(rng, &[3, 2, 4]));
            let stride = rng.gen_range(1..=2);
            let pad = padding_for(rng);
            grad_check_multi(
                move |t, v| {
                    let c = t.temporal_conv_joints(v[0], v[1], stride, pad)?;
                    let sq = t.mul(c, c)?;
                    Ok(t.sum_all(sq))
                },
                &[x, w],
                GRAD_H,
            )
        }),
        ("pad_and_truncate_rows", |rng| {
            let x = rt(rng, &[4, 3]);
            let extra = rng.gen_range(0..3);
            grad_check(
                move |t, v| {
                    let p = t.pad_edge_rows(v, extra)?;
                    let sq = t.mul(p, p)?;
                    let back = t.truncate_rows(sq, 3)?;
                    Ok(t.sum_all(back))
                },
                &x,
                GRAD_H,
            )
        }),
        ("info_nce_global", |rng| {
            let (p, k) = (rt(rng, &[8]), rt(rng, &[8]));
            let negs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            grad_check_multi(
                move |t, v| info_nce(t, v[0], v[1], &negs, 0.1),
                &[p, k],
                GRAD_H,
            )
        }),
        ("dense_snippet_loss", |rng| {
            let (s_a, s_p) = (rt(rng, &[4, 6]), rt(rng, &[4, 6]));
            let mut bank = MemoryBank::new(8, 6);
            let entries: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            bank.enqueue(&entries).unwrap();
            let mut matches: Vec<usize> = (0..4).collect();
            matches.reverse();
            grad_check_multi(
                move |t, v| dense_contrastive_loss(t, v[0], v[1], &matches, &bank, 0.1),
                &[s_a, s_p],
                GRAD_H,
            )
        }),
        ("combined_loss", |rng| {
            let (p, k) = (rt(rng, &[6]), rt(rng, &[6]));
            let (s_a, s_p) = (rt(rng, &[3, 6]), rt(rng, &[3, 6]));
            let mut bank = MemoryBank::new(8, 6);
            let entries: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            bank.enqueue(&entries).unwrap();
            let negs = entries.clone();
            grad_check_multi(
                move |t, v| {
                    let lg = info_nce(t, v[0], v[1], &negs, 0.1)?;
                    let ld = dense_contrastive_loss(t, v[2], v[3], &[0, 1, 2], &bank, 0.1)?;
                    total_loss(t, lg, ld, 1.5)
                },
                &[p, k, s_a, s_p],
                GRAD_H,
            )
        }),
    ]
}

/// Runs every check on `seeds` independent random fixtures and reports the
/// worst relative error per operation.
pub fn run_grad_suite(seeds: usize) -> Result<GradSuiteReport, TensorError> {
    let mut results = Vec::new();
    for (name, check) in checks() {
        let mut worst: f64 = 0.0;
        for s in 0..seeds {
            let mut rng = stream(s as u64, name);
            worst = worst.max(check(&mut rng)?);
        }
        results.push(GradCheckResult {
            name: name.to_string(),
            max_rel_err: worst,
            pass: worst <= GRAD_TOL,
        });
    }
    Ok(GradSuiteReport { seeds, results })
}
