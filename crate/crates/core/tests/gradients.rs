use cocoon::gradcheck::{check_model_gradients, finite_diff_check};
use cocoon::losses::{loss_aa, loss_av, loss_class, loss_clust};
use cocoon::{EncoderConfig, LabeledBatch, Modality, ModelConfig, ModelParams, PairBatch, ParamGroup, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;

fn toy_model() -> ModelConfig {
    ModelConfig {
        audio: EncoderConfig {
            input_dim: 8,
            hidden: vec![8],
            embed_dim: 8,
        },
        image: EncoderConfig {
            input_dim: 6,
            hidden: vec![8],
            embed_dim: 8,
        },
        coincidence_hidden: 8,
        clusters: 5,
        logit_scale: 60.0,
        classes: 3,
        classifier_hidden: 8,
    }
}

fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn pairs(modality: Modality, rng: &mut ChaCha8Rng) -> PairBatch {
    let second = if modality == Modality::Aa { 8 } else { 6 };
    PairBatch::new(
        modality,
        rand_matrix(4, 8, rng),
        rand_matrix(4, second, rng),
        PairBatch::all_pairs(4),
    )
    .unwrap()
}

fn assert_close(report: Vec<(String, f64)>, what: &str) {
    assert!(!report.is_empty());
    for (name, err) in report {
        assert!(err < TOL, "{what} {name}: relative error {err}");
    }
}

#[test]
fn coincidence_losses_match_central_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let p = ModelParams::init(&toy_model(), seed).unwrap();
        let aa = pairs(Modality::Aa, &mut rng);
        let av = pairs(Modality::Av, &mut rng);
        let r = check_model_gradients(&p, &[ParamGroup::AudioEncoder, ParamGroup::AaHead], H, |g, v| {
            loss_aa(g, v, &aa)
        })
        .unwrap();
        assert_close(r, "aa");
        let groups = [ParamGroup::AudioEncoder, ParamGroup::ImageEncoder, ParamGroup::AvHead];
        let r = check_model_gradients(&p, &groups, H, |g, v| loss_av(g, v, &av)).unwrap();
        assert_close(r, "av");
    }
}

#[test]
fn clustering_loss_matches_central_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let p = ModelParams::init(&toy_model(), seed).unwrap();
        let audio = rand_matrix(4, 8, &mut rng);
        let r = check_model_gradients(&p, &[ParamGroup::AudioEncoder, ParamGroup::ClusterHead], H, |g, v| {
            loss_clust(g, v, &audio, 1.1)
        })
        .unwrap();
        assert_close(r, "clust");
    }
}

#[test]
fn class_loss_matches_central_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let p = ModelParams::init(&toy_model(), seed).unwrap();
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let batch = LabeledBatch::from_indices(rand_matrix(4, 8, &mut rng), &labels, 3).unwrap();
        let r = check_model_gradients(
            &p,
            &[ParamGroup::AudioEncoder, ParamGroup::ClassifierHead],
            H,
            |g, v| loss_class(g, v, &batch),
        )
        .unwrap();
        assert_close(r, "class");
    }
}

#[test]
fn fan_out_accumulates() {
    // f(x) = sum(x * x + x) has gradient 2x + 1
    let x = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
    let mut g = cocoon::Graph::new();
    let v = g.param(x.clone());
    let sq = g.mul(v, v).unwrap();
    let s = g.add(sq, v).unwrap();
    let y = g.sum(s).unwrap();
    let grad = g.backward(y).unwrap().wrt(v);
    assert_eq!(grad.data(), &[2.0, -3.0, 7.0]);
}

fn point(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn smooth_ops_match_central_differences(x in point(3, 4), w in point(4, 2)) {
        let err = finite_diff_check(&x, H, |g, x| {
            let w = g.constant(w.clone());
            let h = g.matmul(x, w)?;
            let s = g.sigmoid(h)?;
            let l = g.log_prob(s)?;
            let n = g.l2_normalize(x)?;
            let e = g.exp(n)?;
            let a = g.sum(l)?;
            let b = g.mean(e)?;
            g.sub(b, a)
        }).unwrap();
        prop_assert!(err < TOL, "{err}");
    }

    #[test]
    fn softmax_and_reductions_match_central_differences(x in point(3, 5)) {
        let err = finite_diff_check(&x, H, |g, x| {
            let p = g.softmax_scaled(x, 3.0)?;
            let col = g.mean_axis(p, 0)?;
            let lp = g.log_prob(col)?;
            let m = g.mul(col, lp)?;
            let t = g.transpose(x)?;
            let r = g.sum_axis(t, 1)?;
            let sq = g.mul(r, r)?;
            let a = g.sum(m)?;
            let b = g.mean(sq)?;
            g.add(a, b)
        }).unwrap();
        prop_assert!(err < TOL, "{err}");
    }
}
