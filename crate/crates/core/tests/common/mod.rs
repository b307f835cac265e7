//! Shared fixtures for the integration tests.

#![allow(dead_code)]

pub mod oracle;
pub mod reference;

use mciprog::recurrent::{bilstm_forward, lstm_cell_step, BiLstmConfig, LstmCellParams, OutputMode, Predictor};
use mciprog::stem::{Extractor, ExtractorConfig, StemConfig};
use mciprog::tensor::{grad_check, grad_check_sampled, Bound, ParamStore, Tape, Tensor, Var};
use mciprog::vit::{encoder_block_forward, lora_linear, multihead_attention_lora, EncoderBlock, VitConfig};
use mciprog::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 10;
pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-4;
/// Recurrent and loss kernels.
pub const TOL_TIGHT: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts any output with fixed random weights so every element of it
/// reaches the scalar objective.
pub fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let w = Tensor::randn(tape.value(out).shape(), 1.0, &mut rng(0xC0FFEE));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    /// Builds parameters and objective for one seeded trial.
    pub build: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Objective),
    /// Probe at most this many coordinates per parameter.
    pub sample: Option<usize>,
}

impl GradCase {
    /// Worst relative error over [`TRIALS`] seeded trials.
    pub fn worst_error(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for trial in 0..TRIALS {
            let mut r = rng(1000 + trial);
            let (params, f) = (self.build)(&mut r);
            let report = match self.sample {
                Some(k) => grad_check_sampled(&f, &params, EPS, k, trial)?,
                None => grad_check(&f, &params, EPS)?,
            };
            worst = worst.max(report.max_rel_error);
        }
        Ok(worst)
    }
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn case(name: &'static str, tol: f64, build: fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Objective)) -> GradCase {
    GradCase {
        name,
        tol,
        build,
        sample: None,
    }
}

pub fn small_extractor() -> ExtractorConfig {
    ExtractorConfig {
        stem: StemConfig {
            channels: vec![4, 8],
            strides: vec![2, 2],
            bridge_channels: [6, 4],
            ..StemConfig::default()
        },
        vit: VitConfig {
            blocks: 1,
            dim: 16,
            heads: 2,
            rank: 2,
            patch: 8,
            side: 32,
            ..VitConfig::desk()
        },
    }
}

fn small_block(r: &mut ChaCha8Rng) -> (ParamStore, EncoderBlock) {
    let cfg = small_extractor().vit;
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "block", &cfg, r).unwrap();
    // nonzero B so the adapter path contributes
    let ids: Vec<_> = block.adapters().iter().map(|a| a.b).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::randn(&shape, 0.5, r);
    }
    (store, block)
}

/// Every differentiable tape operation, the composite kernels, and both
/// end-to-end models.
pub fn grad_cases() -> Vec<GradCase> {
    let mut cases = vec![
        case("matmul", TOL, |r| {
            (vec![randn(&[3, 4], r), randn(&[4, 2], r)], Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y)
            }))
        }),
        case("linear", TOL, |r| {
            (vec![randn(&[3, 4], r), randn(&[5, 4], r)], Box::new(|t, v| {
                let y = t.linear(v[0], v[1])?;
                probe(t, y)
            }))
        }),
        case("add_sub_mul", TOL, |r| {
            (vec![randn(&[2, 3], r), randn(&[2, 3], r)], Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(v[0], v[1])?;
                let y = t.mul(a, s)?;
                probe(t, y)
            }))
        }),
        case("add_row", TOL, |r| {
            (vec![randn(&[3, 4], r), randn(&[4], r)], Box::new(|t, v| {
                let y = t.add_row(v[0], v[1])?;
                probe(t, y)
            }))
        }),
        case("scale_affine", TOL, |r| {
            (vec![randn(&[5], r)], Box::new(|t, v| {
                let y = t.scale(v[0], -1.7);
                let y = t.affine(y, 0.3, 2.0);
                probe(t, y)
            }))
        }),
        case("sigmoid", TOL, |r| {
            (vec![randn(&[6], r)], Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                probe(t, y)
            }))
        }),
        case("tanh", TOL, |r| {
            (vec![randn(&[6], r)], Box::new(|t, v| {
                let y = t.tanh(v[0]);
                probe(t, y)
            }))
        }),
        case("swish", TOL, |r| {
            (vec![randn(&[6], r)], Box::new(|t, v| {
                let y = t.swish(v[0]);
                probe(t, y)
            }))
        }),
        case("gelu", TOL, |r| {
            (vec![randn(&[6], r)], Box::new(|t, v| {
                let y = t.gelu(v[0]);
                probe(t, y)
            }))
        }),
        case("softmax", TOL, |r| {
            (vec![randn(&[3, 5], r)], Box::new(|t, v| {
                let y = t.softmax(v[0])?;
                probe(t, y)
            }))
        }),
        case("layer_norm", TOL, |r| {
            (vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)], Box::new(|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
                probe(t, y)
            }))
        }),
        case("conv2d", TOL, |r| {
            (vec![randn(&[2, 6, 6], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)], Box::new(|t, v| {
                let a = t.conv2d(v[0], v[1], 1, 1)?;
                let b = t.conv2d(v[0], v[1], 2, 0)?;
                let a = t.add_channel_bias(a, v[2])?;
                let pa = probe(t, a)?;
                let pb = probe(t, b)?;
                t.add(pa, pb)
            }))
        }),
        case("bilinear_resize", TOL, |r| {
            (vec![randn(&[2, 4, 5], r)], Box::new(|t, v| {
                let up = t.bilinear_resize(v[0], 7, 9)?;
                let down = t.bilinear_resize(v[0], 3, 2)?;
                let a = probe(t, up)?;
                let b = probe(t, down)?;
                t.add(a, b)
            }))
        }),
        case("concat_slice_row", TOL, |r| {
            (vec![randn(&[2, 3], r), randn(&[2, 2], r)], Box::new(|t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 3)?;
                let rows = t.concat(&[s, s], 0)?;
                let row = t.row(rows, 3)?;
                let a = probe(t, rows)?;
                let b = probe(t, row)?;
                t.add(a, b)
            }))
        }),
        case("gather_transpose_reshape", TOL, |r| {
            (vec![randn(&[3, 4], r)], Box::new(|t, v| {
                let tr = t.transpose(v[0])?;
                let flat = t.reshape(tr, &[12])?;
                let g = t.gather(flat, vec![0, 5, 5, 11, 2, 7], &[2, 3])?;
                probe(t, g)
            }))
        }),
        case("sum_mean", TOL, |r| {
            (vec![randn(&[4, 3], r)], Box::new(|t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq);
                let m = t.mean(v[0]);
                t.add(s, m)
            }))
        }),
        case("dropout", TOL, |r| {
            (vec![randn(&[4, 5], r)], Box::new(|t, v| {
                let y = t.dropout(v[0], 0.4, true, &mut rng(99))?;
                probe(t, y)
            }))
        }),
        case("focal", TOL_TIGHT, |r| {
            (vec![randn(&[3, 4], r)], Box::new(|t, v| {
                let p = t.softmax(v[0])?;
                let target = Tensor::from_rows(&[
                    vec![0.0, 1.0, 0.0, 0.0],
                    vec![1.0, 0.0, 0.0, 0.0],
                    vec![0.0, 0.0, 0.0, 1.0],
                ])?;
                t.focal(p, &target, &[0.25, 0.5, 1.0, 2.0], 2.0)
            }))
        }),
        case("bce", TOL_TIGHT, |r| {
            (vec![randn(&[5], r)], Box::new(|t, v| {
                let p = t.sigmoid(v[0]);
                t.bce(p, &[1.0, 0.0, 0.0, 1.0, 1.0])
            }))
        }),
        case("lora_linear", TOL, |r| {
            (
                vec![randn(&[3, 6], r), randn(&[5, 6], r), randn(&[2, 6], r), randn(&[5, 2], r)],
                Box::new(|t, v| {
                    let y = lora_linear(t, v[0], v[1], v[2], v[3], 0.7)?;
                    probe(t, y)
                }),
            )
        }),
        case("lstm_cell", TOL_TIGHT, |r| {
            let (i, h) = (4, 3);
            let mut store = ParamStore::new();
            let cell = LstmCellParams::new(&mut store, "cell", i, h, r).unwrap();
            let mut params: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
            params.extend([randn(&[2, i], r), randn(&[2, h], r), randn(&[2, h], r)]);
            (params, Box::new(move |t, v| {
                let n = v.len() - 3;
                let cv = cell.bind(&Bound::from_vars(v[..n].to_vec()));
                let (hh, cc) = lstm_cell_step(t, &cv, v[n], v[n + 1], v[n + 2])?;
                let a = probe(t, hh)?;
                let b = probe(t, cc)?;
                t.add(a, b)
            }))
        }),
        case("bilstm_sequence", TOL_TIGHT, |r| {
            let (i, h) = (3, 2);
            let mut store = ParamStore::new();
            let fwd = LstmCellParams::new(&mut store, "f", i, h, r).unwrap();
            let bwd = LstmCellParams::new(&mut store, "b", i, h, r).unwrap();
            let mut params: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
            params.push(randn(&[4, i], r));
            (params, Box::new(move |t, v| {
                let n = v.len() - 1;
                let bound = Bound::from_vars(v[..n].to_vec());
                let steps = mciprog::recurrent::sequence_steps(t, v[n])?;
                let outs = bilstm_forward(t, &fwd.bind(&bound), &bwd.bind(&bound), &steps)?;
                let all = t.concat(&outs, 0)?;
                probe(t, all)
            }))
        }),
        case("attention", TOL, |r| {
            let (store, block) = small_block(r);
            let mut params: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
            params.push(randn(&[5, 16], r));
            (params, Box::new(move |t, v| {
                let n = v.len() - 1;
                let y = multihead_attention_lora(t, &Bound::from_vars(v[..n].to_vec()), v[n], &block)?;
                probe(t, y)
            }))
        }),
        case("encoder_block", TOL, |r| {
            let (store, block) = small_block(r);
            let mut params: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
            params.push(randn(&[5, 16], r));
            (params, Box::new(move |t, v| {
                let n = v.len() - 1;
                let y = encoder_block_forward(t, &Bound::from_vars(v[..n].to_vec()), v[n], &block)?;
                probe(t, y)
            }))
        }),
    ];
    cases.push(GradCase {
        name: "extractor_end_to_end",
        tol: TOL,
        sample: Some(3),
        build: |r| {
            let model = Extractor::new(&small_extractor(), r).unwrap();
            let mut params: Vec<Tensor> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
            params.push(randn(&[3, 32, 32], r));
            (params, Box::new(move |t, v| {
                let n = v.len() - 1;
                let out = model.forward(t, &Bound::from_vars(v[..n].to_vec()), v[n])?;
                let p = t.softmax(out.logits)?;
                t.focal(p, &Tensor::vector(vec![0.0, 0.0, 1.0]), &[1.0; 3], 0.0)
            }))
        },
    });
    cases.push(GradCase {
        name: "predictor_end_to_end",
        tol: TOL,
        sample: Some(4),
        build: |r| {
            let cfg = BiLstmConfig {
                input: 7,
                hidden: 4,
                dropout: 0.5,
                output: OutputMode::SingleLogit,
                ..BiLstmConfig::paper()
            };
            let model = Predictor::new(&cfg, r).unwrap();
            let mut params: Vec<Tensor> = model.store.iter().map(|(_, p)| p.value.clone()).collect();
            params.push(randn(&[4, 21], r));
            (params, Box::new(move |t, v| {
                let n = v.len() - 1;
                let steps: Vec<Var> = (0..4)
                    .map(|s| {
                        let x = t.row(v[n], s)?;
                        t.reshape(x, &[3, 7])
                    })
                    .collect::<Result<_>>()?;
                let logit = model.forward(t, &Bound::from_vars(v[..n].to_vec()), &steps, true, &mut rng(5))?;
                let p = t.sigmoid(logit);
                let p = t.reshape(p, &[3])?;
                t.bce(p, &[1.0, 0.0, 1.0])
            }))
        },
    });
    cases
}
