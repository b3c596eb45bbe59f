use super::*;
use crate::nn::attention::{attention_weights, dense_attention, windowed_attention};
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &device()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

fn var(model: &Lstn, name: &str) -> Tensor {
    for b in model.param_blocks() {
        if let Some(v) = b.vars.data().lock().unwrap().get(name) {
            return v.as_tensor().clone();
        }
    }
    panic!("no parameter {name}")
}

fn set_zero(model: &Lstn, name: &str) {
    for b in model.param_blocks() {
        if let Some(v) = b.vars.data().lock().unwrap().get(name) {
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }
}

#[test]
fn encoder_grid_is_ceiling_division() {
    assert_eq!(feature_grid((465, 465)), (30, 30));
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let f = model.encode(&rand_tensor(&[1, 3, 64, 64], 1)).unwrap();
    assert_eq!(f.grid, (4, 4));
    assert_eq!(f.tokens.dims3().unwrap(), (1, 16, 8));
    let odd = model.encode(&rand_tensor(&[1, 3, 37, 50], 2)).unwrap();
    assert_eq!(odd.grid, (3, 4));
    assert_eq!(odd.map().unwrap().dims4().unwrap(), (1, 8, 3, 4));
    let again = model.encode(&rand_tensor(&[1, 3, 37, 50], 2)).unwrap();
    assert_eq!(max_diff(&odd.tokens, &again.tokens), 0.0);
}

#[test]
fn self_attention_on_single_cell() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let b = &model.blocks()[0];
    let x = rand_tensor(&[1, 1, 8], 3);
    let w = attention_weights(&x, &x, 1).unwrap();
    assert_eq!(w.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0]);
    // with one key the attention output is the value projection of LN1(x)
    let ln1 = var(&model, "lst.0.norm1.weight");
    assert_eq!(ln1.dims(), &[8]);
    let y = b.self_attend(&x, (1, 1)).unwrap();
    assert_eq!(y.dims3().unwrap(), (1, 1, 8));
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let b = &model.blocks()[0];
    let x = rand_tensor(&[1, 12, 8], 4);
    let perm: Vec<u32> = vec![5, 0, 11, 3, 7, 1, 9, 2, 10, 4, 8, 6];
    let idx = Tensor::from_slice(&perm, 12, &device()).unwrap();
    let y = b.self_attend(&x, (3, 4)).unwrap();
    let yp = b.self_attend(&x.index_select(&idx, 1).unwrap(), (3, 4)).unwrap();
    assert!(max_diff(&y.index_select(&idx, 1).unwrap(), &yp) < 1e-12);
}

#[test]
fn positional_encoding_breaks_equivariance() {
    let model = Lstn::new(LstnConfig { positional_encoding: true, ..LstnConfig::toy(8, 1) }).unwrap();
    let b = &model.blocks()[0];
    let x = rand_tensor(&[1, 4, 8], 5);
    let idx = Tensor::from_slice(&[1u32, 0, 3, 2], 4, &device()).unwrap();
    let y = b.self_attend(&x, (2, 2)).unwrap();
    let yp = b.self_attend(&x.index_select(&idx, 1).unwrap(), (2, 2)).unwrap();
    assert!(max_diff(&y.index_select(&idx, 1).unwrap(), &yp) > 1e-6);
}

#[test]
fn zero_mask_with_zero_bias_gives_plain_value() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    set_zero(&model, "lst.0.mask_conv.down1.bias");
    set_zero(&model, "lst.0.mask_conv.down2.bias");
    let b = &model.blocks()[0];
    let refined = rand_tensor(&[1, 4, 8], 6);
    let mask = Tensor::zeros((1, 1, 32, 32), DTYPE, &device()).unwrap();
    let e = b.memory_entry(&refined, &mask, 0, (2, 2)).unwrap();
    let psi_w = var(&model, "lst.0.psi.weight");
    let psi_b = var(&model, "lst.0.psi.bias");
    let plain = refined.broadcast_matmul(&psi_w.t().unwrap()).unwrap().broadcast_add(&psi_b).unwrap();
    assert!(max_diff(&e.value, &plain) < 1e-12);
    assert_eq!(e.key.dims(), refined.dims());
}

#[test]
fn mask_resolution_mismatch_is_contract_error() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let refined = rand_tensor(&[1, 4, 8], 7);
    let mask = Tensor::zeros((1, 1, 64, 64), DTYPE, &device()).unwrap();
    assert!(matches!(model.blocks()[0].memory_entry(&refined, &mask, 0, (2, 2)), Err(Error::Contract(_))));
}

/// Straight-line evaluation of `k = φ(f̃)`, `v = ψ(f̃ + MaskConv(M))` from the raw parameters.
fn memory_oracle(model: &Lstn, refined: &[f64], mask: &[f64], size: usize) -> (Vec<f64>, Vec<f64>) {
    let c = model.config().channels;
    let s = model.config().skip_channels();
    let get = |n: &str| var(model, n).flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let linear = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        let n = x.len() / c;
        let mut out = vec![0.0; n * c];
        for t in 0..n {
            for o in 0..c {
                out[t * c + o] = b[o] + (0..c).map(|i| w[o * c + i] * x[t * c + i]).sum::<f64>();
            }
        }
        out
    };
    let conv4 = |x: &[f64], cin: usize, side: usize, w: &[f64], b: &[f64], cout: usize| -> Vec<f64> {
        let o_side = side / 4;
        let mut out = vec![0.0; cout * o_side * o_side];
        for oc in 0..cout {
            for oy in 0..o_side {
                for ox in 0..o_side {
                    let mut acc = b[oc];
                    for ic in 0..cin {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                acc += w[((oc * cin + ic) * 4 + ky) * 4 + kx]
                                    * x[(ic * side + oy * 4 + ky) * side + ox * 4 + kx];
                            }
                        }
                    }
                    out[(oc * o_side + oy) * o_side + ox] = acc;
                }
            }
        }
        out
    };
    let gelu = |v: f64| 0.5 * v * (1.0 + erf(v / std::f64::consts::SQRT_2));
    let h1: Vec<f64> = conv4(mask, 1, size, &get("lst.0.mask_conv.down1.weight"), &get("lst.0.mask_conv.down1.bias"), s)
        .into_iter()
        .map(gelu)
        .collect();
    let m = conv4(&h1, s, size / 4, &get("lst.0.mask_conv.down2.weight"), &get("lst.0.mask_conv.down2.bias"), c);
    let g = size / 16;
    let mut summed = refined.to_vec();
    for t in 0..g * g {
        for ch in 0..c {
            summed[t * c + ch] += m[ch * g * g + t];
        }
    }
    (
        linear(refined, &get("lst.0.phi.weight"), &get("lst.0.phi.bias")),
        linear(&summed, &get("lst.0.psi.weight"), &get("lst.0.psi.bias")),
    )
}

fn erf(x: f64) -> f64 {
    // Maclaurin series
    let mut sum = x;
    let mut term = x;
    let x2 = x * x;
    for n in 1..200 {
        term *= -x2 / n as f64;
        sum += term / (2 * n + 1) as f64;
        if term.abs() < 1e-18 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

#[test]
fn memory_update_matches_oracle() {
    let model = Lstn::new(LstnConfig { seed: 9, ..LstnConfig::toy(8, 1) }).unwrap();
    let refined = rand_tensor(&[1, 4, 8], 10);
    let mask = rand_tensor(&[1, 1, 32, 32], 11).abs().unwrap();
    let e = model.blocks()[0].memory_entry(&refined, &mask, 3, (2, 2)).unwrap();
    let (k, v) = memory_oracle(
        &model,
        &refined.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        &mask.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
        32,
    );
    let got_k = e.key.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let got_v = e.value.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!(got_k.iter().zip(&k).all(|(a, b)| (a - b).abs() < 1e-6));
    assert!(got_v.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-6));
    assert_eq!(e.frame, 3);
}

#[test]
fn phi_is_shared_between_queries_and_keys() {
    let model = Lstn::new(LstnConfig::toy(8, 2)).unwrap();
    let names: Vec<String> = model.param_blocks()[1].vars.data().lock().unwrap().keys().cloned().collect();
    for i in 0..2 {
        let prefix = format!("lst.{i}.");
        let projections: Vec<&String> = names
            .iter()
            .filter(|n| n.starts_with(&prefix) && n.ends_with(".weight") && (n.contains("phi") || n.contains("key")))
            .collect();
        assert_eq!(projections, vec![&format!("lst.{i}.phi.weight")]);
    }
    let b = &model.blocks()[0];
    let refined = rand_tensor(&[1, 4, 8], 12);
    let mask = Tensor::zeros((1, 1, 32, 32), DTYPE, &device()).unwrap();
    let e = b.memory_entry(&refined, &mask, 0, (2, 2)).unwrap();
    assert_eq!(max_diff(&b.project_key(&refined).unwrap(), &e.key), 0.0);
}

fn entry(key: Tensor, value: Tensor, grid: (usize, usize)) -> MemoryEntry {
    MemoryEntry { frame: 0, key, value, grid }
}

#[test]
fn long_term_attention_cases() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let b = &model.blocks()[0];
    let q = rand_tensor(&[1, 9, 8], 13);
    let v = rand_tensor(&[1, 9, 8], 14);
    let constant = Tensor::ones((1, 9, 8), DTYPE, &device()).unwrap();
    let out = b.long_term_attention(&q, &entry(constant, v.clone(), (3, 3))).unwrap();
    let mean = v.mean_keepdim(1).unwrap().broadcast_as((1, 9, 8)).unwrap();
    assert!(max_diff(&out, &mean) < 1e-12);

    let single = b
        .long_term_attention(&q.narrow(1, 0, 1).unwrap(), &entry(rand_tensor(&[1, 1, 8], 15), v.narrow(1, 0, 1).unwrap(), (1, 1)))
        .unwrap();
    assert!(max_diff(&single, &v.narrow(1, 0, 1).unwrap()) < 1e-15);

    // naive loop oracle
    let k = rand_tensor(&[1, 9, 8], 16);
    let out = b.long_term_attention(&q, &entry(k.clone(), v.clone(), (3, 3))).unwrap();
    let qv = q.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
    let kv = k.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
    let vv = v.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
    let ov = out.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
    for i in 0..9 {
        let logits: Vec<f64> = (0..9).map(|j| (0..8).map(|c| qv[i][c] * kv[j][c]).sum::<f64>() / 8f64.sqrt()).collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..8 {
            let want: f64 = (0..9).map(|j| e[j] / z * vv[j][c]).sum();
            assert!((ov[i][c] - want).abs() < 1e-5);
        }
    }
}

#[test]
fn short_term_window_one_is_identity() {
    let q = rand_tensor(&[1, 12, 8], 17);
    let k = rand_tensor(&[1, 12, 8], 18);
    let v = rand_tensor(&[1, 12, 8], 19);
    let t = WindowTable::new((3, 4), 1).unwrap();
    let out = windowed_attention(&q, &k, &v, 1, &t).unwrap();
    assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), v.flatten_all().unwrap().to_vec1::<f64>().unwrap());
}

#[test]
fn covering_window_equals_dense_on_small_grids() {
    for h in 1..=6 {
        for w in 1..=6 {
            let n = h * w;
            let q = rand_tensor(&[2, n, 8], (h * 10 + w) as u64);
            let k = rand_tensor(&[2, n, 8], (h * 10 + w + 100) as u64);
            let v = rand_tensor(&[2, n, 8], (h * 10 + w + 200) as u64);
            let size = 2 * h.max(w) - 1;
            let t = WindowTable::new((h, w), size).unwrap();
            let a = windowed_attention(&q, &k, &v, 1, &t).unwrap();
            let d = dense_attention(&q, &k, &v, 1).unwrap();
            assert!(max_diff(&a, &d) <= 1e-5, "{h}x{w}");
        }
    }
}

#[test]
fn config_errors() {
    assert!(matches!(Lstn::new(LstnConfig { window: 4, ..LstnConfig::toy(8, 1) }), Err(Error::Config(_))));
    assert!(Lstn::new(LstnConfig::toy(6, 1)).is_err());
    assert!(Lstn::new(LstnConfig { blocks: 0, ..LstnConfig::toy(8, 1) }).is_err());
    let d = LstnConfig::default();
    assert_eq!((d.blocks, d.window, d.channels, d.heads), (3, 15, 256, 1));
}

#[test]
fn empty_bank_is_contract_error() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let mut bank = MemoryBank::new();
    assert!(matches!(model.predict(&rand_tensor(&[1, 3, 32, 32], 20), &mut bank), Err(Error::Contract(_))));
}

#[test]
fn block_preserves_shape_and_decoder_resolution() {
    for blocks in 1..=3 {
        let model = Lstn::new(LstnConfig::toy(8, blocks)).unwrap();
        let mask = rand_tensor(&[1, 1, 37, 45], 21).abs().unwrap();
        let mut bank = model.seed(&rand_tensor(&[1, 3, 37, 45], 22), &mask, 0).unwrap();
        let pred = model.predict(&rand_tensor(&[1, 3, 37, 45], 23), &mut bank).unwrap();
        assert_eq!(pred.logits.dims4().unwrap(), (1, 1, 37, 45));
        assert_eq!(pred.refined.len(), blocks);
        for r in &pred.refined {
            assert_eq!(r.dims3().unwrap(), (1, 9, 8));
        }
        let p = sigmoid(&pred.logits).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        let sat = sigmoid(&(pred.logits + 100.0).unwrap()).unwrap().flatten_all().unwrap().min(0).unwrap();
        assert!(sat.to_scalar::<f64>().unwrap() > 1.0 - 1e-12);
    }
}

#[test]
fn second_frame_reads_seed_as_short_term() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let mask = rand_tensor(&[1, 1, 32, 32], 24).abs().unwrap();
    let bank = model.seed(&rand_tensor(&[1, 3, 32, 32], 25), &mask, 0).unwrap();
    let long = bank.long_term().unwrap();
    let short = bank.short_term().unwrap();
    assert_eq!((long.frame, short.frame), (0, 0));
    assert_eq!(max_diff(&long.entries[0].value, &short.entries[0].value), 0.0);
}

#[test]
fn memory_discipline_over_ten_frames() {
    let model = Lstn::new(LstnConfig::toy(8, 2)).unwrap();
    let mask = rand_tensor(&[1, 1, 32, 32], 26).abs().unwrap();
    let mut bank = model.seed(&rand_tensor(&[1, 3, 32, 32], 27), &mask, 0).unwrap();
    for t in 1..10 {
        assert_eq!(bank.short_term().unwrap().frame, t - 1);
        model.step(&rand_tensor(&[1, 3, 32, 32], 28 + t as u64), &mut bank, t).unwrap();
        assert_eq!(bank.short_term().unwrap().frame, t);
        assert_eq!(bank.long_term().unwrap().frame, 0);
    }
    let s = bank.stats();
    assert_eq!((s.long_writes, s.long_reads, s.short_writes, s.short_reads), (1, 9, 10, 9));
}

#[test]
fn component_toggles_share_weights() {
    let model = Lstn::new(LstnConfig::toy(8, 1)).unwrap();
    let off = model.with_components(false, false).unwrap();
    assert!(!off.config().long_term && !off.config().short_term);
    let frames = rand_tensor(&[1, 3, 32, 32], 40);
    let mask = rand_tensor(&[1, 1, 32, 32], 41).abs().unwrap();
    // without memory readouts the seed mask cannot influence the prediction
    let mut b1 = off.seed(&frames, &mask, 0).unwrap();
    let mut b2 = off.seed(&frames, &mask.zeros_like().unwrap(), 0).unwrap();
    let next = rand_tensor(&[1, 3, 32, 32], 42);
    let p1 = off.predict(&next, &mut b1).unwrap().logits;
    let p2 = off.predict(&next, &mut b2).unwrap().logits;
    assert_eq!(max_diff(&p1, &p2), 0.0);
    assert_eq!(b1.stats().long_reads, 0);
    let mut b3 = model.seed(&frames, &mask, 0).unwrap();
    let p3 = model.predict(&next, &mut b3).unwrap().logits;
    assert!(max_diff(&p1, &p3) > 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let model = Lstn::new(LstnConfig { seed: 5, ..LstnConfig::toy(8, 2) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lstn.safetensors");
    model.save(&path).unwrap();
    let back = Lstn::load(&path).unwrap();
    assert_eq!(back.config(), model.config());
    let frames = rand_tensor(&[1, 3, 32, 32], 30);
    let mask = rand_tensor(&[1, 1, 32, 32], 31).abs().unwrap();
    let next = rand_tensor(&[1, 3, 32, 32], 32);
    let mut a = model.seed(&frames, &mask, 0).unwrap();
    let mut b = back.seed(&frames, &mask, 0).unwrap();
    assert_eq!(max_diff(&model.step(&next, &mut a, 1).unwrap(), &back.step(&next, &mut b, 1).unwrap()), 0.0);
    assert!(crate::segmenter::SamLite::load(&path).is_err());
}
