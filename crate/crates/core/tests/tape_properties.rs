use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umbc::{finite_diff_check, Matrix, ParamGroup, ParamStore, Result, Tape, Var};

const OPS: [&str; 23] = [
    "matmul", "add", "sub", "mul", "div", "exp", "log", "sigmoid", "softplus", "relu", "layernorm", "sum_rows",
    "sum_cols", "max_cols", "broadcast_row", "broadcast_col", "scale", "transpose", "slice_cols", "reshape", "sqrt",
    "logsumexp_cols", "softmax_rows",
];

/// Values bounded away from zero, so `relu`, `log`, `div` and `sqrt` stay
/// away from their kinks and poles.
fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let m = rng.random_range(0.3..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn apply(op: &str, t: &mut Tape, a: Var, b: Var, r: usize, c: usize) -> Result<Var> {
    Ok(match op {
        "matmul" => {
            let bt = t.transpose(b);
            t.matmul(a, bt)?
        }
        "add" => t.add(a, b)?,
        "sub" => t.sub(a, b)?,
        "mul" => t.mul(a, b)?,
        "div" => {
            let bb = t.mul(b, b)?;
            t.div(a, bb)?
        }
        "exp" => t.exp(a),
        "log" => {
            let aa = t.mul(a, a)?;
            t.log(aa)?
        }
        "sigmoid" => t.sigmoid(a),
        "softplus" => t.softplus(a),
        "relu" => t.relu(a),
        "layernorm" => t.layernorm_rows(a),
        "sum_rows" => t.sum_rows(a),
        "sum_cols" => t.sum_cols(a),
        "max_cols" => t.max_cols(a),
        "broadcast_row" => {
            let s = t.sum_cols(a);
            t.broadcast_row(s, r + 1)?
        }
        "broadcast_col" => {
            let s = t.sum_rows(a);
            t.broadcast_col(s, c + 1)?
        }
        "scale" => t.scale(a, -1.7),
        "transpose" => t.transpose(a),
        "slice_cols" => t.slice_cols(a, c / 2, c)?,
        "reshape" => t.reshape(a, c, r)?,
        "sqrt" => {
            let aa = t.mul(a, a)?;
            t.sqrt(aa)?
        }
        "logsumexp_cols" => t.logsumexp_cols(a)?,
        "softmax_rows" => t.softmax_rows(a)?,
        other => unreachable!("unknown op {other}"),
    })
}

/// Scalar `sum(op(a, b) * w)` with a fixed random weighting `w`.
fn weighted_output(op: &str, t: &mut Tape, a: Var, b: Var, r: usize, c: usize, seed: u64) -> Result<Var> {
    let y = apply(op, t, a, b, r, c)?;
    let (yr, yc) = t.shape(y);
    let w = t.constant(Matrix::random_normal(yr, yc, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_op_matches_central_differences(op in 0usize..OPS.len(), r in 1usize..=8, c in 1usize..=8, seed in any::<u64>()) {
        let op = OPS[op];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.insert("a", away_from_zero(r, c, &mut rng), ParamGroup::Encoder).unwrap();
        let b = store.insert("b", away_from_zero(r, c, &mut rng), ParamGroup::Decoder).unwrap();
        let report = finite_diff_check(&mut store, 1e-5, |s, t| {
            let (va, vb) = (t.param(s, a), t.param(s, b));
            weighted_output(op, t, va, vb, r, c, seed)
        })
        .unwrap();
        if op == "layernorm" && c == 2 {
            // Two-column rows normalize to +-1; the true gradient is at the
            // scale of the normalizer's epsilon, below the difference noise.
            prop_assert!(report.max_abs_error <= 1e-9, "{op} {r}x{c}: {report:?}");
        } else {
            prop_assert!(report.max_rel_error <= 1e-4, "{op} {r}x{c}: {report:?}");
        }
    }

    #[test]
    fn stop_grad_cuts_every_path(r in 1usize..=6, c in 1usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.insert("a", away_from_zero(r, c, &mut rng), ParamGroup::Encoder).unwrap();
        let b = store.insert("b", away_from_zero(r, c, &mut rng), ParamGroup::Encoder).unwrap();
        let mut t = Tape::new();
        let (va, vb) = (t.param(&store, a), t.param(&store, b));
        // b reaches the loss only through the barrier, twice.
        let hb = t.exp(vb);
        let hb = t.mul(hb, va).unwrap();
        let frozen = t.stop_grad(hb);
        let mixed = t.mul(va, frozen).unwrap();
        let sq = t.softplus(frozen);
        let y = t.add(mixed, sq).unwrap();
        let loss = t.sum_all(y);
        let g = t.backward(loss).unwrap();
        prop_assert!(g.param(b).is_none_or(|m| m.max_abs() == 0.0));
        prop_assert!(g.param(a).is_some_and(|m| m.max_abs() > 0.0));
    }

    #[test]
    fn identical_inputs_give_bit_identical_results(op in 0usize..OPS.len(), r in 1usize..=8, c in 1usize..=8, seed in any::<u64>()) {
        let op = OPS[op];
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let a = store.insert("a", away_from_zero(r, c, &mut rng), ParamGroup::Encoder).unwrap();
            let b = store.insert("b", away_from_zero(r, c, &mut rng), ParamGroup::Decoder).unwrap();
            let mut t = Tape::new();
            let (va, vb) = (t.param(&store, a), t.param(&store, b));
            let l = weighted_output(op, &mut t, va, vb, r, c, seed).unwrap();
            let g = t.backward(l).unwrap();
            let bits = |m: Option<&Matrix>| m.map(|m| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            (t.value(l)[(0, 0)].to_bits(), bits(g.param(a)), bits(g.param(b)))
        };
        prop_assert_eq!(run(), run());
    }
}
