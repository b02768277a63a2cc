//! Contrastive identity disentanglement: shared multi-head attention splits
//! each latent level into an attribute code and a residual identity code,
//! and recombines codes across images.
//!
//! All three pyramid levels are processed independently by the same
//! attention parameters. Heads share the projection matrices; the output
//! projection maps the h-fold concatenation (h*d wide) back to width d.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{DbafError, Result};
use crate::nn::{init_scaled, Graph, ParamId, ParamRole, ParamStore};
use crate::types::{DisentangledCodes, LatentPyramid};
use ndarray::Array2;
use rand::Rng;

/// Shared attention parameters: three d x d projections and an (h*d) x d
/// output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub heads: usize,
    pub d: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        role: ParamRole,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(heads >= 1, "head count must be at least 1");
        let w_q = store.add(format!("{name}.w_q"), role, init_scaled(&[d, d], d, rng));
        let w_k = store.add(format!("{name}.w_k"), role, init_scaled(&[d, d], d, rng));
        let w_v = store.add(format!("{name}.w_v"), role, init_scaled(&[d, d], d, rng));
        let w_o = store.add(
            format!("{name}.w_o"),
            role,
            init_scaled(&[heads * d, d], heads * d, rng),
        );
        Self { w_q, w_k, w_v, w_o, heads, d }
    }
}

// ---- tape-level building blocks ----

/// softmax(Q K^T / sqrt(d_k)) V with the weight matrix returned alongside.
pub fn sdpa_with_weights_t(tape: &mut Tape, q: Var, k: Var, v: Var) -> (Var, Var) {
    let d_k = tape.shape(q)[1];
    assert!(d_k > 0, "d_k must be positive");
    assert_eq!(
        tape.shape(k)[0],
        tape.shape(v)[0],
        "K and V must have equal row counts"
    );
    let kt = tape.transpose2(k);
    let logits = tape.matmul(q, kt);
    let scaled = tape.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = tape.softmax_rows(scaled);
    let out = tape.matmul(weights, v);
    (out, weights)
}

pub fn sdpa_t(tape: &mut Tape, q: Var, k: Var, v: Var) -> Var {
    sdpa_with_weights_t(tape, q, k, v).0
}

/// Multi-head attention over a single level: heads share Q/K/V projections,
/// their concatenation is reduced by W_O.
pub fn mha_t(g: &mut Graph, p: &AttentionParams, c: Var) -> Var {
    assert_eq!(g.tape.shape(c)[1], p.d, "input width must equal d");
    let wq = g.p(p.w_q);
    let wk = g.p(p.w_k);
    let wv = g.p(p.w_v);
    let q = g.tape.matmul(c, wq);
    let k = g.tape.matmul(c, wk);
    let v = g.tape.matmul(c, wv);
    let head = sdpa_t(&mut g.tape, q, k, v);
    let heads: Vec<Var> = std::iter::repeat(head).take(p.heads).collect();
    let cat = g.tape.concat(1, &heads);
    let wo = g.p(p.w_o);
    g.tape.matmul(cat, wo)
}

/// A_z = MHA(C_z), I_z = C_z - A_z for one level.
pub fn disentangle_level_t(g: &mut Graph, p: &AttentionParams, c: Var) -> (Var, Var) {
    let a = mha_t(g, p, c);
    let i = g.tape.sub(c, a);
    (a, i)
}

// ---- value-level operations ----

fn check_finite(name: &str, m: &Array2<f64>) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(DbafError::numeric(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// softmax(Q K^T / sqrt(d_k)) V on plain matrices.
pub fn scaled_dot_product_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(DbafError::shape("Q and K must share width"));
    }
    if k.nrows() != v.nrows() {
        return Err(DbafError::shape("K and V must have equal row counts"));
    }
    if q.ncols() == 0 {
        return Err(DbafError::shape("d_k must be positive"));
    }
    check_finite("Q", q)?;
    check_finite("K", k)?;
    check_finite("V", v)?;
    let mut tape = Tape::new();
    let qv = tape.leaf2(q.clone());
    let kv = tape.leaf2(k.clone());
    let vv = tape.leaf2(v.clone());
    let out = sdpa_t(&mut tape, qv, kv, vv);
    Ok(to2(tape.value(out)))
}

/// Attention weight matrix softmax(Q K^T / sqrt(d_k)).
pub fn attention_weights(q: &Array2<f64>, k: &Array2<f64>) -> Result<Array2<f64>> {
    check_finite("Q", q)?;
    check_finite("K", k)?;
    let mut tape = Tape::new();
    let qv = tape.leaf2(q.clone());
    let kv = tape.leaf2(k.clone());
    let vv = tape.leaf2(Array2::zeros((k.nrows(), 1)));
    let (_, w) = sdpa_with_weights_t(&mut tape, qv, kv, vv);
    Ok(to2(tape.value(w)))
}

/// Multi-head attention over one n x d matrix.
pub fn multi_head_attention(
    c: &Array2<f64>,
    params: &AttentionParams,
    store: &ParamStore,
) -> Result<Array2<f64>> {
    if c.ncols() != params.d {
        return Err(DbafError::shape(format!(
            "input width {} does not match d = {}",
            c.ncols(),
            params.d
        )));
    }
    check_finite("C", c)?;
    let mut g = Graph::new(store);
    let cv = g.tape.leaf2(c.clone());
    let out = mha_t(&mut g, params, cv);
    Ok(to2(g.tape.value(out)))
}

/// Splits every level of a pyramid into attribute + identity codes.
pub fn disentangle(
    codes: &LatentPyramid,
    params: &AttentionParams,
    store: &ParamStore,
) -> Result<DisentangledCodes> {
    if codes.d() != params.d {
        return Err(DbafError::shape(format!(
            "pyramid width {} does not match attention d = {}",
            codes.d(),
            params.d
        )));
    }
    let mut attr = Vec::with_capacity(3);
    let mut ident = Vec::with_capacity(3);
    for level in codes.levels() {
        let mut g = Graph::new(store);
        let c = g.tape.leaf2(level.clone());
        let (a, i) = disentangle_level_t(&mut g, params, c);
        attr.push(to2(g.tape.value(a)));
        ident.push(to2(g.tape.value(i)));
    }
    Ok(DisentangledCodes {
        attribute: LatentPyramid::new(attr[0].clone(), attr[1].clone(), attr[2].clone())?,
        identity: LatentPyramid::new(ident[0].clone(), ident[1].clone(), ident[2].clone())?,
    })
}

/// Recombines identity codes from one image with attribute codes from another.
pub fn recombine(
    identity_of: &DisentangledCodes,
    attribute_of: &DisentangledCodes,
) -> Result<LatentPyramid> {
    if identity_of.identity.d() != attribute_of.attribute.d() {
        return Err(DbafError::shape("code widths differ"));
    }
    LatentPyramid::new(
        &identity_of.identity.coarse + &attribute_of.attribute.coarse,
        &identity_of.identity.medium + &attribute_of.attribute.medium,
        &identity_of.identity.fine + &attribute_of.attribute.fine,
    )
}

fn to2(t: &Tensor) -> Array2<f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("rank-2 value")
        .to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference_gradient, max_relative_error};
    use ndarray::{arr2, Array2};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn2(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    /// Independent loop-based reference for softmax(QK^T/sqrt(d))V.
    fn sdpa_reference(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let (nq, d) = (q.nrows(), q.ncols());
        let nk = k.nrows();
        let mut out = Array2::zeros((nq, v.ncols()));
        for i in 0..nq {
            let mut logits = vec![0.0; nk];
            for (j, lj) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[[i, t]] * k[[j, t]];
                }
                *lj = dot / (d as f64).sqrt();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for t in 0..v.ncols() {
                    out[[i, t]] += (e / z) * v[[j, t]];
                }
            }
        }
        out
    }

    /// Independent reference for the full MHA with shared projections.
    fn mha_reference(
        c: &Array2<f64>,
        wq: &Array2<f64>,
        wk: &Array2<f64>,
        wv: &Array2<f64>,
        wo: &Array2<f64>,
        heads: usize,
    ) -> Array2<f64> {
        let q = c.dot(wq);
        let k = c.dot(wk);
        let v = c.dot(wv);
        let head = sdpa_reference(&q, &k, &v);
        let (n, d) = (head.nrows(), head.ncols());
        let mut cat = Array2::zeros((n, heads * d));
        for h in 0..heads {
            cat.slice_mut(ndarray::s![.., h * d..(h + 1) * d]).assign(&head);
        }
        cat.dot(wo)
    }

    #[test]
    fn single_row_attention_returns_the_value_row() {
        let q = arr2(&[[0.3, -0.7]]);
        let k = arr2(&[[1.5, 2.0]]);
        let v = arr2(&[[4.0, -9.0]]);
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn identical_keys_give_the_mean_of_values() {
        let q = arr2(&[[0.5, 1.0], [-2.0, 0.25]]);
        let k = arr2(&[[3.0, -1.0], [3.0, -1.0], [3.0, -1.0]]);
        let v = arr2(&[[1.0, 0.0], [0.0, 1.0], [2.0, 5.0]]);
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            assert!((out[[i, 0]] - 1.0).abs() < 1e-12);
            assert!((out[[i, 1]] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_attention_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = randn2(2, 2, &mut rng);
        let k = randn2(2, 2, &mut rng);
        let v = randn2(2, 2, &mut rng);
        let got = scaled_dot_product_attention(&q, &k, &v).unwrap();
        let expect = sdpa_reference(&q, &k, &v);
        let err = max_relative_error(&got.into_dyn(), &expect.into_dyn(), 1e-9);
        assert!(err < 1e-12, "attention differs from reference: {err}");
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let q = arr2(&[[f64::NAN, 0.0]]);
        let k = arr2(&[[1.0, 1.0]]);
        let v = arr2(&[[1.0, 1.0]]);
        assert!(matches!(
            scaled_dot_product_attention(&q, &k, &v),
            Err(DbafError::Numeric(_))
        ));
    }

    fn test_params(
        d: usize,
        heads: usize,
        seed: u64,
    ) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttentionParams::new(&mut store, "cid", ParamRole::Generator, d, heads, &mut rng);
        (store, p)
    }

    #[test]
    fn zero_output_projection_gives_zero_mha() {
        let (mut store, p) = test_params(4, 3, 1);
        store.set(p.w_o, crate::nn::zeros(&[3 * 4, 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = randn2(5, 4, &mut rng);
        let out = multi_head_attention(&c, &p, &store).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_projections_with_zero_logits_average_rows() {
        let d = 3;
        let (mut store, p) = test_params(d, 1, 3);
        store.set(p.w_q, crate::nn::zeros(&[d, d]));
        store.set(p.w_k, crate::nn::zeros(&[d, d]));
        store.set(p.w_v, Array2::eye(d).into_dyn());
        store.set(p.w_o, Array2::eye(d).into_dyn());
        let c = arr2(&[[1.0, 2.0, 3.0], [5.0, 6.0, 7.0], [0.0, -2.0, 2.0]]);
        let out = multi_head_attention(&c, &p, &store).unwrap();
        let mean = [2.0, 2.0, 4.0];
        for row in out.rows() {
            for (got, want) in row.iter().zip(mean.iter()) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn seeded_mha_matches_independent_reference() {
        let (store, p) = test_params(6, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = randn2(4, 6, &mut rng);
        let got = multi_head_attention(&c, &p, &store).unwrap();
        let wq = to2(store.value(p.w_q));
        let wk = to2(store.value(p.w_k));
        let wv = to2(store.value(p.w_v));
        let wo = to2(store.value(p.w_o));
        let expect = mha_reference(&c, &wq, &wk, &wv, &wo, 2);
        let err = max_relative_error(&got.into_dyn(), &expect.into_dyn(), 1e-9);
        assert!(err < 1e-10, "MHA differs from reference: {err}");
    }

    #[test]
    fn disentangle_splits_and_reconstructs_exactly() {
        let (store, p) = test_params(8, 4, 17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let codes = LatentPyramid::new(
            randn2(4, 8, &mut rng),
            randn2(4, 8, &mut rng),
            randn2(6, 8, &mut rng),
        )
        .unwrap();
        let split = disentangle(&codes, &p, &store).unwrap();
        let back = split.recompose().unwrap();
        assert!(back.linf_distance(&codes) <= 1e-12);
        // attribute equals the MHA output per level
        for (level, a_level) in codes.levels().iter().zip(split.attribute.levels()) {
            let a = multi_head_attention(level, &p, &store).unwrap();
            assert_eq!(&a, a_level);
        }
    }

    #[test]
    fn zero_projection_makes_identity_equal_input() {
        let (mut store, p) = test_params(5, 2, 19);
        store.set(p.w_o, crate::nn::zeros(&[2 * 5, 5]));
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let codes = LatentPyramid::new(
            randn2(4, 5, &mut rng),
            randn2(4, 5, &mut rng),
            randn2(6, 5, &mut rng),
        )
        .unwrap();
        let split = disentangle(&codes, &p, &store).unwrap();
        assert_eq!(split.identity, codes);
        assert!(split.attribute.stacked().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn recombining_own_codes_restores_the_pyramid() {
        let (store, p) = test_params(8, 4, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let codes = LatentPyramid::new(
            randn2(4, 8, &mut rng),
            randn2(4, 8, &mut rng),
            randn2(6, 8, &mut rng),
        )
        .unwrap();
        let split = disentangle(&codes, &p, &store).unwrap();
        let rec = recombine(&split, &split).unwrap();
        assert!(rec.linf_distance(&codes) <= 1e-12);
    }

    #[test]
    fn recombine_with_zero_identity_returns_attribute_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let attr = LatentPyramid::new(
            randn2(4, 3, &mut rng),
            randn2(4, 3, &mut rng),
            randn2(6, 3, &mut rng),
        )
        .unwrap();
        let id_codes = DisentangledCodes {
            attribute: LatentPyramid::zeros(3).unwrap(),
            identity: LatentPyramid::zeros(3).unwrap(),
        };
        let attr_codes = DisentangledCodes {
            attribute: attr.clone(),
            identity: LatentPyramid::zeros(3).unwrap(),
        };
        let rec = recombine(&id_codes, &attr_codes).unwrap();
        assert_eq!(rec, attr);
    }

    #[test]
    fn recombine_matches_direct_addition() {
        let (store, p) = test_params(8, 4, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let c1 = LatentPyramid::new(
            randn2(4, 8, &mut rng),
            randn2(4, 8, &mut rng),
            randn2(6, 8, &mut rng),
        )
        .unwrap();
        let c2 = LatentPyramid::new(
            randn2(4, 8, &mut rng),
            randn2(4, 8, &mut rng),
            randn2(6, 8, &mut rng),
        )
        .unwrap();
        let d1 = disentangle(&c1, &p, &store).unwrap();
        let d2 = disentangle(&c2, &p, &store).unwrap();
        let got = recombine(&d1, &d2).unwrap();
        // direct addition oracle
        let expect = LatentPyramid::new(
            &d1.identity.coarse + &d2.attribute.coarse,
            &d1.identity.medium + &d2.attribute.medium,
            &d1.identity.fine + &d2.attribute.fine,
        )
        .unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn levels_are_processed_independently() {
        let (store, p) = test_params(8, 4, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let codes = LatentPyramid::new(
            randn2(4, 8, &mut rng),
            randn2(4, 8, &mut rng),
            randn2(6, 8, &mut rng),
        )
        .unwrap();
        let split = disentangle(&codes, &p, &store).unwrap();
        let mut perturbed = codes.clone();
        perturbed.medium[[2, 5]] += 10.0;
        let split2 = disentangle(&perturbed, &p, &store).unwrap();
        assert_eq!(split.attribute.coarse, split2.attribute.coarse);
        assert_eq!(split.attribute.fine, split2.attribute.fine);
        assert_eq!(split.identity.coarse, split2.identity.coarse);
        assert_eq!(split.identity.fine, split2.identity.fine);
        assert_ne!(split.attribute.medium, split2.attribute.medium);
    }

    #[test]
    fn mha_gradients_match_central_differences() {
        let d = 8;
        let heads = 4;
        let (store, p) = test_params(d, heads, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let c = randn2(4, d, &mut rng).into_dyn();
        let proj = randn2(4, d, &mut rng).into_dyn();
        let wq = store.value(p.w_q).clone();
        let wk = store.value(p.w_k).clone();
        let wv = store.value(p.w_v).clone();
        let wo = store.value(p.w_o).clone();
        let inputs = vec![c, wq, wk, wv, wo];

        // scalar objective: sum(R . MHA(C)) over a fixed projection R
        let eval = |xs: &[Tensor]| -> f64 {
            let mut st = ParamStore::new();
            let mut rr = ChaCha8Rng::seed_from_u64(33);
            let pp = AttentionParams::new(&mut st, "cid", ParamRole::Generator, d, heads, &mut rr);
            st.set(pp.w_q, xs[1].clone());
            st.set(pp.w_k, xs[2].clone());
            st.set(pp.w_v, xs[3].clone());
            st.set(pp.w_o, xs[4].clone());
            let mut g = Graph::new(&st);
            let cv = g.tape.leaf(xs[0].clone());
            let out = mha_t(&mut g, &pp, cv);
            let r = g.tape.leaf(proj.clone());
            let weighted = g.tape.mul(out, r);
            let s = g.tape.sum_all(weighted);
            g.tape.scalar_value(s)
        };

        // analytic gradients
        let mut g = Graph::new(&store);
        let cv = g.tape.leaf(inputs[0].clone());
        let out = mha_t(&mut g, &p, cv);
        let r = g.tape.leaf(proj.clone());
        let weighted = g.tape.mul(out, r);
        let s = g.tape.sum_all(weighted);
        let grads = g.tape.backward(s);

        let analytic = [
            grads.get(cv).unwrap().clone(),
            grads.get(g.p(p.w_q)).unwrap().clone(),
            grads.get(g.p(p.w_k)).unwrap().clone(),
            grads.get(g.p(p.w_v)).unwrap().clone(),
            grads.get(g.p(p.w_o)).unwrap().clone(),
        ];
        for (i, a) in analytic.iter().enumerate() {
            let numeric = finite_difference_gradient(eval, &inputs, i, 1e-5);
            let err = max_relative_error(a, &numeric, 1e-6);
            assert!(err < 1e-4, "input {i}: gradient error {err}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn attention_weights_are_row_stochastic(seed in 0u64..1_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = randn2(4, 6, &mut rng);
            let k = randn2(5, 6, &mut rng);
            let w = attention_weights(&q, &k).unwrap();
            for row in w.rows() {
                let sum: f64 = row.sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn decomposition_is_exact(seed in 0u64..1_000) {
            let (store, p) = test_params(8, 4, 101);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes = LatentPyramid::new(
                randn2(4, 8, &mut rng),
                randn2(4, 8, &mut rng),
                randn2(6, 8, &mut rng),
            ).unwrap();
            let split = disentangle(&codes, &p, &store).unwrap();
            let back = split.recompose().unwrap();
            prop_assert!(back.linf_distance(&codes) <= 1e-6);
        }
    }
}
