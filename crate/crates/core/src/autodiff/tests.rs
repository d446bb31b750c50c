//! Finite-difference verification of every tape op in 64-bit mode.

use super::*;
use crate::encoding::HashGridConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Builds the scalar root from a tape and the pre-registered input nodes.
type Build = dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId;

fn forward_value(store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new(store);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = build(&mut tape, &ids);
    tape.value_scalar(root)
}

/// Checks analytic gradients of all params and inputs against central
/// finite differences.
fn check_grads(mut store: ParamStore<f64>, mut inputs: Vec<Tensor<f64>>, build: &Build) {
    let mut tape = Tape::new(&store);
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let root = build(&mut tape, &ids);
    let mut grads = GradStore::new(&store);
    tape.backward(root, &mut grads).unwrap();
    let analytic_params: Vec<Option<Vec<f64>>> = store
        .iter()
        .map(|(id, _)| grads.get(id).map(|g| g.to_vec()))
        .collect();
    let analytic_inputs: Vec<Option<Vec<f64>>> = ids
        .iter()
        .map(|id| tape.input_grad(*id).map(|g| g.to_vec()))
        .collect();
    drop(tape);

    let rel = |a: f64, b: f64| (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()));

    for p in 0..store.len() {
        let n = store.get(ParamId(p as u32)).data.len();
        for i in 0..n {
            let orig = store.get(ParamId(p as u32)).data[i];
            store.get_mut(ParamId(p as u32)).data[i] = orig + FD_H;
            let fp = forward_value(&store, &inputs, build);
            store.get_mut(ParamId(p as u32)).data[i] = orig - FD_H;
            let fm = forward_value(&store, &inputs, build);
            store.get_mut(ParamId(p as u32)).data[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_H);
            let an = analytic_params[p].as_ref().map_or(0.0, |g| g[i]);
            assert!(
                rel(an, fd) < FD_TOL,
                "param {p}[{i}]: analytic {an} vs fd {fd}"
            );
        }
    }
    for k in 0..inputs.len() {
        for i in 0..inputs[k].data.len() {
            let orig = inputs[k].data[i];
            inputs[k].data[i] = orig + FD_H;
            let fp = forward_value(&store, &inputs, build);
            inputs[k].data[i] = orig - FD_H;
            let fm = forward_value(&store, &inputs, build);
            inputs[k].data[i] = orig;
            let fd = (fp - fm) / (2.0 * FD_H);
            let an = analytic_inputs[k].as_ref().map_or(0.0, |g| g[i]);
            assert!(
                rel(an, fd) < FD_TOL,
                "input {k}[{i}]: analytic {an} vs fd {fd}"
            );
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

#[test]
fn square_at_three_has_gradient_six() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::scalar(3.0));
    let y = tape.square(x);
    let mut grads = GradStore::new(&store);
    tape.backward(y, &mut grads).unwrap();
    assert_eq!(tape.input_grad(x).unwrap()[0], 6.0);
}

#[test]
fn sigmoid_at_zero() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    assert_eq!(tape.value_scalar(y), 0.5);
    let mut grads = GradStore::new(&store);
    tape.backward(y, &mut grads).unwrap();
    assert_eq!(tape.input_grad(x).unwrap()[0], 0.25);
}

#[test]
fn mlp_three_layer_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let dims = [(4usize, 8usize), (8, 8), (8, 1)];
    for (l, (i, o)) in dims.iter().enumerate() {
        let w: Vec<f64> = (0..i * o).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let b: Vec<f64> = (0..*o).map(|_| rng.gen_range(-0.3..0.3)).collect();
        store.add(format!("w{l}"), *i, *o, w, ParamGroup::Main);
        store.add(format!("b{l}"), 1, *o, b, ParamGroup::Main);
    }
    let x = rand_tensor(&mut rng, 5, 4, -1.0, 1.0);
    check_grads(store, vec![x], &|tape, ids| {
        let mut h = ids[0];
        for l in 0..3 {
            let w = tape.param(tape_param(tape, &format!("w{l}")));
            let b = tape.param(tape_param(tape, &format!("b{l}")));
            h = tape.matmul(h, w);
            h = tape.add_row_vec(h, b);
            if l < 2 {
                h = tape.relu(h);
            }
        }
        let s = tape.sigmoid(h);
        tape.sum_all(s)
    });
}

fn tape_param(tape: &Tape<f64>, name: &str) -> ParamId {
    tape.params().id_of(name).unwrap()
}

#[test]
fn elementwise_chain_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, 3, 4, 0.2, 1.5);
    let b = rand_tensor(&mut rng, 3, 4, 0.3, 1.2);
    check_grads(ParamStore::new(), vec![a, b], &|tape, ids| {
        let m = tape.mul(ids[0], ids[1]);
        let d = tape.div(ids[0], ids[1]);
        let s = tape.sub(m, d);
        let e = tape.exp(s);
        let l = tape.ln(ids[1]);
        let sn = tape.sin(ids[0]);
        let cs = tape.cos(ids[1]);
        let t1 = tape.add(e, l);
        let t2 = tape.mul(sn, cs);
        let t3 = tape.add(t1, t2);
        let t4 = tape.softplus(t3);
        let t5 = tape.affine(t4, 0.7, -0.1);
        let sq = tape.square(t5);
        tape.sum_all(sq)
    });
}

#[test]
fn broadcast_ops_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, 6, 3, -1.0, 1.0);
    let v = rand_tensor(&mut rng, 1, 3, -1.0, 1.0);
    let c = rand_tensor(&mut rng, 6, 1, 0.5, 1.5);
    check_grads(ParamStore::new(), vec![x, v, c], &|tape, ids| {
        let a = tape.add_row_vec(ids[0], ids[1]);
        let m = tape.mul_col_vec(a, ids[2]);
        let r = tape.relu(m);
        tape.sum_all(r)
    });
}

#[test]
fn normalize_rows_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, 4, 3, 0.3, 2.0);
    check_grads(ParamStore::new(), vec![x], &|tape, ids| {
        let n = tape.normalize_rows(ids[0]);
        let s = tape.sin(n);
        tape.sum_all(s)
    });
}

#[test]
fn concat_slice_gather_scatter_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = rand_tensor(&mut rng, 4, 2, -1.0, 1.0);
    let b = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
    check_grads(ParamStore::new(), vec![a, b], &|tape, ids| {
        let cat = tape.concat_cols(&[ids[0], ids[1]]);
        let sl = tape.slice_cols(cat, 1, 3);
        let idx = Arc::new(vec![0u32, 2, 2, 3, 1]);
        let g = tape.gather_rows(sl, idx);
        let back = Arc::new(vec![1u32, 0, 3, 3, 2]);
        let sc = tape.scatter_add_rows(g, back, 5);
        let sq = tape.square(sc);
        tape.sum_all(sq)
    });
}

#[test]
fn segment_ops_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, 8, 2, -1.0, 1.0);
    check_grads(ParamStore::new(), vec![x], &|tape, ids| {
        let cs = tape.seg_cumsum_excl(ids[0], 4);
        let e = tape.exp(cs);
        let m = tape.mul(e, ids[0]);
        let ss = tape.seg_sum(m, 4);
        let sq = tape.square(ss);
        tape.sum_all(sq)
    });
}

#[test]
fn gather_param_rows_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let table: Vec<f64> = (0..10 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.add("table", 10, 4, table, ParamGroup::Main);
    check_grads(store, vec![], &|tape, _| {
        let pid = tape.params().id_of("table").unwrap();
        let idx = Arc::new(vec![3u32, 7, 3, 0]);
        let rows = tape.gather_param_rows(pid, idx);
        let s = tape.sigmoid(rows);
        tape.sum_all(s)
    });
}

#[test]
fn hash_grid_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let cfg = HashGridConfig {
        num_levels: 3,
        base_resolution: 4,
        per_level_scale: 2.0,
        table_size_log2: 8,
        features_per_entry: 2,
    };
    let mut store = ParamStore::new();
    let table: Vec<f64> = (0..cfg.table_rows() * 2).map(|_| rng.gen_range(-0.5..0.5)).collect();
    store.add("grid", cfg.table_rows(), 2, table, ParamGroup::Main);
    let x = rand_tensor(&mut rng, 5, 3, -1.8, 1.8);
    check_grads(store, vec![x], &move |tape, ids| {
        let pid = tape.params().id_of("grid").unwrap();
        let enc = tape.hash_grid(ids[0], pid, Arc::new(cfg));
        let s = tape.square(enc);
        tape.sum_all(s)
    });
}

#[test]
fn pos_enc_sh_enc_contract_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_tensor(&mut rng, 4, 3, 0.2, 1.6);
    check_grads(ParamStore::new(), vec![x], &|tape, ids| {
        let ct = tape.contract(ids[0]);
        let pe = tape.pos_enc(ct, 4);
        let nd = tape.normalize_rows(ids[0]);
        let sh = tape.sh_enc(nd, 4);
        let s1 = tape.sum_all(pe);
        let s2 = tape.sum_all(sh);
        let sq1 = tape.square(s1);
        let sq2 = tape.square(s2);
        tape.add(sq1, sq2)
    });
}

#[test]
fn color_blend_gradients_match_fd_and_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sa = rand_tensor(&mut rng, 5, 1, 0.1, 2.0);
    let ca = rand_tensor(&mut rng, 5, 3, 0.0, 1.0);
    let sb = rand_tensor(&mut rng, 5, 1, 0.1, 2.0);
    let cb = rand_tensor(&mut rng, 5, 3, 0.0, 1.0);
    check_grads(ParamStore::new(), vec![sa, ca, sb, cb], &|tape, ids| {
        let c = tape.color_blend(ids[0], ids[1], ids[2], ids[3]);
        let sq = tape.square(c);
        tape.sum_all(sq)
    });

    // zero-density side drops out entirely
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let sa = tape.input(Tensor::from_vec(1, 1, vec![0.0]));
    let ca = tape.input(Tensor::from_vec(1, 3, vec![0.9, 0.1, 0.4]));
    let sb = tape.input(Tensor::from_vec(1, 1, vec![2.0]));
    let cb = tape.input(Tensor::from_vec(1, 3, vec![0.2, 0.8, 0.6]));
    let c = tape.color_blend(sa, ca, sb, cb);
    assert_eq!(tape.values(c), &[0.2, 0.8, 0.6]);
}

#[test]
fn binary_entropy_values_and_gradients() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let p = tape.input(Tensor::from_vec(3, 1, vec![0.0, 0.5, 0.9]));
    let h = tape.binary_entropy(p);
    let v = tape.values(h);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((v[2] - 0.3250829733914482).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = rand_tensor(&mut rng, 6, 1, 0.05, 0.95);
    check_grads(ParamStore::new(), vec![p], &|tape, ids| {
        let h = tape.binary_entropy(ids[0]);
        tape.sum_all(h)
    });
}

#[test]
fn matmul_param_gradients_match_fd() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let mut store = ParamStore::new();
    let w: Vec<f64> = (0..6 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.add("w", 6, 3, w, ParamGroup::Main);
    let x = rand_tensor(&mut rng, 4, 6, -1.0, 1.0);
    check_grads(store, vec![x], &|tape, ids| {
        let w = tape.params().id_of("w").unwrap();
        let wn = tape.param(w);
        let y = tape.matmul(ids[0], wn);
        let sq = tape.square(y);
        tape.sum_all(sq)
    });
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let mut store = ParamStore::<f32>::new();
    let w: Vec<f32> = (0..8 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wid = store.add("w", 8, 4, w, ParamGroup::Main);
    let x = Tensor::from_vec(
        16,
        8,
        (0..16 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    );
    let run = || {
        let mut tape = Tape::new(&store);
        let xn = tape.input(x.clone());
        let wn = tape.param(wid);
        let y = tape.matmul(xn, wn);
        let s = tape.sigmoid(y);
        let r = tape.sum_all(s);
        let mut grads = GradStore::new(&store);
        tape.backward(r, &mut grads).unwrap();
        grads.get(wid).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_scalar_root_rejected() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(Tensor::zeros(2, 2));
    let mut grads = GradStore::new(&store);
    assert!(matches!(
        tape.backward(x, &mut grads),
        Err(TapeError::NonScalarRoot)
    ));
}

#[test]
#[should_panic(expected = "matmul inner dims")]
fn shape_mismatch_panics() {
    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let a = tape.input(Tensor::zeros(2, 3));
    let b = tape.input(Tensor::zeros(2, 3));
    tape.matmul(a, b);
}
