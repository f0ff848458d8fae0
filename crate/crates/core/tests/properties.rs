use ndarray::Array2;
use proptest::prelude::*;
use rectiflow::data::{make_distribution, DataSource};
use rectiflow::flow::{flow_loss, interpolate};
use rectiflow::fusion::{scaled_dot_attention, vq_quantize, Codebook, GatedFusion, SelfAttentionRefine};
use rectiflow::metrics::{energy_distance, straightness};
use rectiflow::model::FlowModel;
use rectiflow::persistence::{from_bytes, to_bytes};
use rectiflow::solvers::euler_integrate;
use rectiflow::vectorfield::{time_embed, VectorFieldConfig};
use rectiflow::seeded_rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-10.0..10.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn shaped_pair() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_is_affine_in_t((x0, x1) in shaped_pair(), t in 0.0..=1.0f64) {
        let ts = vec![t; x0.nrows()];
        let xt = interpolate(x0.view(), x1.view(), &ts).unwrap();
        for ((a, b), v) in x0.iter().zip(x1.iter()).zip(xt.iter()) {
            let affine = a + t * (b - a);
            prop_assert!((v - affine).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()));
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_at_the_displacement((x0, x1) in shaped_pair(), v in matrix(1, 1)) {
        let exact = &x1 - &x0;
        prop_assert_eq!(flow_loss(exact.view(), x0.view(), x1.view()).unwrap(), 0.0);
        let shifted = &exact + v[[0, 0]];
        let l = flow_loss(shifted.view(), x0.view(), x1.view()).unwrap();
        prop_assert!(l >= 0.0);
        if v[[0, 0]] != 0.0 {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn energy_distance_is_symmetric((a, b) in (1usize..8, 1usize..8, 1usize..4)
        .prop_flat_map(|(n, m, d)| (matrix(n, d), matrix(m, d))))
    {
        let ab = energy_distance(a.view(), b.view(), 1).unwrap();
        prop_assert_eq!(ab, energy_distance(b.view(), a.view(), 3).unwrap());
        prop_assert!(ab > -1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 4), heads in prop_oneof![Just(1usize), Just(2), Just(4)]) {
        let (_, weights) = scaled_dot_attention(q.view(), k.view(), v.view(), heads).unwrap();
        for w in &weights {
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant(x in matrix(5, 4), seed in 0u64..1000, perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
        let refine = SelfAttentionRefine::new(4, &mut seeded_rng(seed)).unwrap();
        let (h, _) = refine.forward(x.view(), 2).unwrap();
        let xp = x.select(ndarray::Axis(0), &perm);
        let (hp, _) = refine.forward(xp.view(), 2).unwrap();
        prop_assert_eq!(hp, h.select(ndarray::Axis(0), &perm));
    }

    #[test]
    fn saturated_gate_picks_a_branch(a in matrix(1, 3), b in matrix(1, 3)) {
        let mut gate = GatedFusion::new(3, &mut seeded_rng(0));
        gate.gate.weight.value.fill(0.0);
        for (bias, expect) in [(40.0, &a), (-40.0, &b)] {
            gate.gate.bias.as_mut().unwrap().value.fill(bias);
            let (out, _) = gate.forward(a.view(), b.view()).unwrap();
            for (o, e) in out.iter().zip(expect.iter()) {
                prop_assert!((o - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantization_error_is_within_half_spacing(values in proptest::collection::vec(-3.0..3.0f64, 1..20), size in 2usize..65) {
        let book = Codebook::pitch_default(size).unwrap();
        let spacing = 6.0 / (size - 1) as f64;
        let (idx, q) = vq_quantize(&values, &book);
        for ((v, i), qv) in values.iter().zip(&idx).zip(&q) {
            prop_assert!((v - qv).abs() <= spacing / 2.0 + 1e-12);
            prop_assert_eq!(*qv, book.entries()[*i]);
        }
    }

    #[test]
    fn euler_is_exact_on_constant_fields(u in matrix(1, 3), z0 in matrix(4, 3), steps in 1usize..50) {
        let field = |z: ndarray::ArrayView2<f64>, _t: f64| {
            let mut out = Array2::zeros(z.raw_dim());
            out.rows_mut().into_iter().for_each(|mut r| r.assign(&u.row(0)));
            out
        };
        let traj = euler_integrate(&field, z0.view(), steps, true).unwrap();
        prop_assert_eq!(traj.nfe, steps);
        prop_assert!(traj.times.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(traj.states.last().unwrap(), traj.endpoint());
        let end = traj.endpoint();
        for r in 0..4 {
            for c in 0..3 {
                prop_assert!((end[[r, c]] - (z0[[r, c]] + u[[0, c]])).abs() < 1e-12 * (1.0 + z0[[r, c]].abs() + u[[0, c]].abs()) * steps as f64);
            }
        }
        prop_assert_eq!(straightness(&field, z0.view(), steps).unwrap(), 0.0);
    }

    #[test]
    fn time_embedding_is_bounded_and_pythagorean(t in 0.0..=1.0f64, half in 1usize..9) {
        let e = time_embed(t, 2 * half).unwrap();
        for j in 0..half {
            prop_assert!((e[j] * e[j] + e[half + j] * e[half + j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoints_round_trip_for_any_seed(seed in 0u64..10_000, dim in 1usize..4, width in 1usize..6) {
        let mut cfg = VectorFieldConfig::new(dim);
        cfg.hidden = vec![width, width];
        let mut model = FlowModel::new(cfg, None, &mut seeded_rng(seed)).unwrap();
        model.meta.seed = seed;
        let bytes = to_bytes(&model, None).unwrap();
        let back = from_bytes(&bytes).unwrap().model;
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(to_bytes(&back, None).unwrap(), bytes);
    }

    #[test]
    fn checkerboard_samples_are_members(seed in 0u64..500) {
        let d = make_distribution("checkerboard").unwrap();
        let x = d.sample(64, &mut seeded_rng(seed)).unwrap();
        prop_assert!(x.rows().into_iter().all(|r| d.contains(r)));
    }
}
