//! Dense tensors and reverse-mode differentiation for the operations the
//! speech heads use.

pub mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use graph::{column_moments, Gradients, Graph, Var, NORM_EPSILON, NORM_VARIANCE_EPSILON};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheckConfig};
    use super::nn::{transformer_encoder_layer, EncoderLayerVars, FeedForwardVars};
    use super::*;
    use crate::error::Error;
    use crate::rng::{normal_tensor, seeded};

    fn m(rows: usize, cols: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, d.to_vec()).unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn gradcheck<F>(inputs: &[Tensor], f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
    {
        let report = check_gradients(inputs, f, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{:?}", report.failures);
        assert!(report.checked > 0);
    }

    /// Random projection of every output entry to a scalar, so the check
    /// covers all output coordinates.
    fn readout(g: &mut Graph, y: Var, seed: u64) -> crate::Result<Var> {
        let shape = g.value(y).shape().to_vec();
        let w = normal_tensor(&mut seeded(seed), &shape, 1.0);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let b = g.constant(m(2, 2, &[1., 2., 3., 4.]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);

        let p = g.constant(m(2, 2, &[1., 0., 0., 0.]));
        let b = g.constant(m(2, 2, &[5., 6., 7., 8.]));
        let c = g.matmul(p, b).unwrap();
        assert_eq!(g.value(c).data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = seeded(11);
        let a = normal_tensor(&mut rng, &[3, 4], 1.0);
        let b = normal_tensor(&mut rng, &[4, 2], 1.0);
        let report = check_gradients(
            &[a, b],
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                readout(g, c, 1)
            },
            GradCheckConfig {
                rel_tol: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.5, 2.5, 2.5]));
        let y = g.softmax(x, 0.3).unwrap();
        assert_close(g.value(y).data(), &[1. / 3.; 3], 1e-15);

        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let y = g.softmax(x, 0.1).unwrap();
        let e10 = 10f64.exp();
        assert_close(g.value(y).data(), &[e10 / (e10 + 1.0), 1.0 / (e10 + 1.0)], 1e-15);
        assert!((g.value(y).data()[0] - 0.9999546).abs() < 1e-7);
        assert!((g.value(y).data()[1] - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(g.softmax(x, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.softmax(x, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn softmax_gradient() {
        let x = normal_tensor(&mut seeded(3), &[7], 1.0);
        let report = check_gradients(
            &[x],
            |g, v| {
                let y = g.softmax(v[0], 0.7)?;
                readout(g, y, 2)
            },
            GradCheckConfig {
                rel_tol: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn l2_normalize_values_and_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_close(g.value(y).data(), &[0.6, 0.8], 1e-15);
        let y2 = g.l2_normalize(y).unwrap();
        assert_close(g.value(y2).data(), g.value(y).data(), 1e-15);

        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(g.l2_normalize(z), Err(Error::DegenerateVector { .. })));
    }

    #[test]
    fn l2_normalize_gradient() {
        let x = normal_tensor(&mut seeded(5), &[5], 1.0);
        gradcheck(&[x], |g, v| {
            let y = g.l2_normalize(v[0])?;
            readout(g, y, 4)
        });
    }

    #[test]
    fn cosine_similarity_values() {
        let mut g = Graph::new();
        let a = g.constant(m(3, 2, &[1., 0., 1., 1., -2., 5.]));
        let b = g.constant(m(2, 2, &[0., 1., 1., 0.]));
        let c = g.cosine_similarity_matrix(a, b).unwrap();
        let cv = g.value(c);
        assert_eq!(cv.at(0, 0), 0.0);
        assert!((cv.at(1, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((cv.at(1, 1) - 0.70711).abs() < 1e-5);

        let s = g.cosine_similarity_matrix(a, a).unwrap();
        for i in 0..3 {
            assert!((g.value(s).at(i, i) - 1.0).abs() < 1e-9);
        }
        let z = g.constant(m(2, 2, &[0., 0., 1., 1.]));
        assert!(g.cosine_similarity_matrix(z, a).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::filled(&[4, 4], 0.3));
        let ce = g.cross_entropy_rows(l, &[0, 1, 2, 3]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-12);

        let l = g.constant(m(2, 2, &[1e9, 0., 0., 1e9]));
        let ce = g.cross_entropy_rows(l, &[0, 1]).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);

        let l = g.constant(m(2, 2, &[1., 0., 0., 1.]));
        let ce = g.cross_entropy_rows(l, &[0, 1]).unwrap();
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((g.value(ce).item() - expected).abs() < 1e-15);
        assert!((expected - 0.31326).abs() < 1e-5);

        assert!(matches!(
            g.cross_entropy_rows(l, &[0, 2]),
            Err(Error::Index { index: 2, .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient() {
        let x = normal_tensor(&mut seeded(8), &[4, 4], 2.0);
        gradcheck(&[x], |g, v| g.cross_entropy_rows(v[0], &[1, 0, 3, 3]));
    }

    #[test]
    fn layer_norm_values() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::vector(vec![1., 1.]));
        let bias = g.constant(Tensor::vector(vec![0., 0.]));
        let x = g.constant(m(1, 2, &[1., 1.]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0.]);

        let x = g.constant(m(1, 2, &[0., 2.]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let s = 1.0 / (1.0f64 + NORM_VARIANCE_EPSILON).sqrt();
        assert_close(g.value(y).data(), &[-s, s], 1e-15);
        assert_close(g.value(y).data(), &[-1., 1.], 1e-5);
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = seeded(9);
        let x = normal_tensor(&mut rng, &[3, 8], 1.0);
        let gain = normal_tensor(&mut rng, &[8], 1.0);
        let bias = normal_tensor(&mut rng, &[8], 1.0);
        gradcheck(&[x, gain, bias], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            readout(g, y, 6)
        });
    }

    #[test]
    fn remaining_primitives_gradients() {
        let mut rng = seeded(10);
        let a = normal_tensor(&mut rng, &[3, 4], 1.0);
        let b = normal_tensor(&mut rng, &[3, 4], 1.0);
        let r = normal_tensor(&mut rng, &[4], 1.0);
        let s = Tensor::scalar(0.7);
        gradcheck(&[a, b, r, s], |g, v| {
            let x = g.sub(v[0], v[1])?;
            let x = g.mul(x, v[1])?;
            let x = g.add_row(x, v[2])?;
            let x = g.mul_row(x, v[2])?;
            let x = g.gelu(x);
            let e = g.exp(v[3]);
            let x = g.scale_by(x, e)?;
            let t = g.transpose(x)?;
            let top = g.slice_rows(t, 1, 2)?;
            let left = g.slice_cols(x, 0, 2)?;
            let right = g.slice_cols(x, 2, 2)?;
            let cat = g.concat_cols(&[right, left])?;
            let top = g.transpose(top)?;
            let cat2 = g.concat_cols(&[top, left])?;
            let stacked = g.concat_rows(&[cat, cat2])?;
            let mean = g.mean_rows(stacked);
            let st = g.standardize_cols(x)?;
            let w = g.constant(Tensor::vector(vec![0.3, -1.2]));
            let l0 = g.slice_rows(st, 0, 1)?;
            let ws = g.weighted_sum(w, &[mean, l0])?;
            readout(g, ws, 12)
        });
    }

    #[test]
    fn weighted_sum_gradient_wrt_weights_and_inputs() {
        let mut rng = seeded(13);
        let w = normal_tensor(&mut rng, &[3], 1.0);
        let x0 = normal_tensor(&mut rng, &[2, 3], 1.0);
        let x1 = normal_tensor(&mut rng, &[2, 3], 1.0);
        let x2 = normal_tensor(&mut rng, &[2, 3], 1.0);
        gradcheck(&[w, x0, x1, x2], |g, v| {
            let sw = g.softmax(v[0], 1.0)?;
            let y = g.weighted_sum(sw, &v[1..])?;
            readout(g, y, 14)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = seeded(21);
        for _ in 0..20 {
            let x = normal_tensor(&mut rng, &[4, 9], 5.0);
            let shifted: Vec<f64> = x.data().iter().map(|v| v + 123.456).collect();
            let mut g = Graph::new();
            let a = g.constant(x.clone());
            let b = g.constant(Tensor::new(vec![4, 9], shifted).unwrap());
            let ya = g.softmax(a, 0.1).unwrap();
            let yb = g.softmax(b, 0.1).unwrap();
            for r in 0..4 {
                let s: f64 = g.value(ya).row(r).iter().sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
            assert_close(g.value(ya).data(), g.value(yb).data(), 1e-12);
        }
    }

    #[test]
    fn stop_gradient_blocks_and_straight_through_routes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let s = g.stop_gradient(x);
        let hard = g.constant(Tensor::vector(vec![5.0, 7.0]));
        let st = g.straight_through(hard, x).unwrap();
        assert_eq!(g.value(st).data(), &[5.0, 7.0]);
        let sum = g.add(s, st).unwrap();
        let w = g.constant(Tensor::vector(vec![3.0, -2.0]));
        let p = g.mul(sum, w).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -2.0]);
        assert!(grads.get(s).is_none());
        assert!(grads.get(hard).is_none());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut rng = seeded(17);
        let x = normal_tensor(&mut rng, &[5, 8], 1.0);
        let w = normal_tensor(&mut rng, &[8, 8], 0.3);
        let run = || {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let y = g.matmul(xv, wv).unwrap();
            let y = g.softmax(y, 0.5).unwrap();
            let y = g.l2_normalize(y).unwrap();
            let loss = readout(&mut g, y, 3).unwrap();
            let grads = g.backward(loss).unwrap();
            (grads.get(xv).unwrap().clone(), grads.get(wv).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }

    fn layer_inputs(rng: &mut crate::rng::Rng, d: usize, t: usize, ffn: bool) -> Vec<Tensor> {
        let mut v = vec![normal_tensor(rng, &[t, d], 1.0)];
        let s = 1.0 / (d as f64).sqrt();
        for _ in 0..4 {
            v.push(normal_tensor(rng, &[d, d], s));
            v.push(normal_tensor(rng, &[d], 0.1));
        }
        v.push(gain_like(rng, d));
        v.push(normal_tensor(rng, &[d], 0.1));
        if ffn {
            v.push(normal_tensor(rng, &[d, 4 * d], s));
            v.push(normal_tensor(rng, &[4 * d], 0.1));
            v.push(normal_tensor(rng, &[4 * d, d], 0.5 * s));
            v.push(normal_tensor(rng, &[d], 0.1));
            v.push(gain_like(rng, d));
            v.push(normal_tensor(rng, &[d], 0.1));
        }
        v
    }

    fn gain_like(rng: &mut crate::rng::Rng, d: usize) -> Tensor {
        let noise = normal_tensor(rng, &[d], 0.2);
        Tensor::vector(noise.data().iter().map(|x| 1.0 + x).collect())
    }

    fn bind(v: &[Var]) -> EncoderLayerVars {
        EncoderLayerVars {
            wq: v[1],
            bq: v[2],
            wk: v[3],
            bk: v[4],
            wv: v[5],
            bv: v[6],
            wo: v[7],
            bo: v[8],
            ln1_gain: v[9],
            ln1_bias: v[10],
            ffn: (v.len() > 11).then(|| FeedForwardVars {
                w1: v[11],
                b1: v[12],
                w2: v[13],
                b2: v[14],
                ln2_gain: v[15],
                ln2_bias: v[16],
            }),
        }
    }

    #[test]
    fn attention_single_position_has_unit_weight() {
        let mut rng = seeded(30);
        let inputs = layer_inputs(&mut rng, 8, 1, false);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.param(t)).collect();
        let p = bind(&vars);
        let out = nn::multi_head_attention(&mut g, vars[0], &p, 2, 1).unwrap();
        for w in out.weights {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_heads_must_divide() {
        let mut rng = seeded(31);
        let inputs = layer_inputs(&mut rng, 8, 5, false);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.param(t)).collect();
        let p = bind(&vars);
        let out = nn::multi_head_attention(&mut g, vars[0], &p, 4, 5).unwrap();
        assert_eq!(out.weights.len(), 4);
        for w in &out.weights {
            assert_eq!(g.value(*w).shape(), &[5, 5]);
            for r in 0..5 {
                let s: f64 = g.value(*w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(
            nn::multi_head_attention(&mut g, vars[0], &p, 3, 5),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn attention_gradient() {
        let mut rng = seeded(32);
        let inputs = layer_inputs(&mut rng, 8, 4, false);
        gradcheck(&inputs, |g, v| {
            let p = bind(v);
            let out = nn::multi_head_attention(g, v[0], &p, 2, 4)?;
            readout(g, out.output, 33)
        });
    }

    #[test]
    fn encoder_layer_gradients_both_variants() {
        for ffn in [false, true] {
            let mut rng = seeded(40 + ffn as u64);
            let inputs = layer_inputs(&mut rng, 8, 3, ffn);
            gradcheck(&inputs, |g, v| {
                let p = bind(v);
                let out = transformer_encoder_layer(g, v[0], &p, 2, ffn, 3)?;
                assert_eq!(g.value(out.output).shape(), &[3, 8]);
                readout(g, out.output, 41)
            });
        }
    }

    #[test]
    fn prefix_queries_match_full_layer_rows() {
        let mut rng = seeded(50);
        let inputs = layer_inputs(&mut rng, 8, 6, true);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.into_iter().map(|t| g.param(t)).collect();
        let p = bind(&vars);
        let full = transformer_encoder_layer(&mut g, vars[0], &p, 4, true, 6).unwrap();
        let head = transformer_encoder_layer(&mut g, vars[0], &p, 4, true, 2).unwrap();
        let fv = g.value(full.output);
        let hv = g.value(head.output);
        assert_close(hv.data(), &fv.data()[..16], 1e-12);
        assert!(transformer_encoder_layer(&mut g, vars[0], &p, 4, false, 6).is_err());
    }
}
