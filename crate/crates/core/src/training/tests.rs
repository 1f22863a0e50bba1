use super::*;
use crate::data::{gen_split, Split, TaskMix};
use crate::numerics::gradcheck::GradCheckOptions;
use crate::numerics::{OpKind, Tensor};
use crate::vocab::MultimodalVocab;

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        ffn_mult: 2,
        n_core_layers: 1,
        n_bottom_layers: 1,
        n_top_layers: 1,
        text_size: 32,
        unit_size: 16,
        vision_feature_dim: 8,
        vision_tokens_per_image: 2,
        ..ModelConfig::default()
    }
}

struct Fixture {
    world: World,
    train: Vec<CorpusRecord>,
    dev: Vec<CorpusRecord>,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let c = small_config();
        let world = World::new(
            MultimodalVocab::new(c.text_size, c.unit_size).unwrap(),
            c.vision_tokens_per_image,
            c.vision_feature_dim,
            11,
        )
        .unwrap();
        let mix = TaskMix::default();
        Fixture {
            train: gen_split(&world, 11, Split::Train, n, &mix).unwrap(),
            dev: gen_split(&world, 11, Split::Dev, 24, &mix).unwrap(),
            world,
        }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            world: &self.world,
            train: &self.train,
            dev: &self.dev,
        }
    }
}

fn quick(steps: usize) -> StageConfig {
    StageConfig {
        steps,
        batch_size: 4,
        warmup: 2,
        eval_samples: 0,
        ..StageConfig::default()
    }
}

fn snapshot(m: &OmniModel<f64>) -> Vec<(String, Vec<u64>)> {
    m.params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Names of tensors whose bits changed.
fn changed(a: &[(String, Vec<u64>)], b: &[(String, Vec<u64>)]) -> Vec<String> {
    a.iter().zip(b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.clone()).collect()
}

#[test]
fn stage_masks_follow_the_table() {
    use ParamGroup::*;
    let all = [Vision, TextEmbedding, Core, SpeechEmbedding, Bottom, Top];
    let on = |s: Stage| all.iter().copied().filter(|g| s.trains(*g)).collect::<Vec<_>>();
    assert_eq!(on(Stage::One), vec![Vision, TextEmbedding, Core]);
    assert_eq!(on(Stage::Two), vec![SpeechEmbedding, Bottom, Top]);
    assert_eq!(on(Stage::Three), vec![Core]);
}

#[test]
fn frozen_parameters_are_bit_identical() {
    let fx = Fixture::new(40);
    for stage in Stage::ALL {
        let mut m = OmniModel::<f64>::new(small_config(), 1).unwrap();
        let before = snapshot(&m);
        train_stage(&mut m, stage, &quick(3), fx.data(), 5, &mut |_| {}).unwrap();
        let moved = changed(&before, &snapshot(&m));
        assert!(!moved.is_empty(), "stage {stage} trained nothing");
        for name in &moved {
            assert!(stage.trains(group_of(name).unwrap()), "stage {stage} changed frozen {name}");
        }
    }
}

#[test]
fn zero_unit_weight_is_pure_ctc() {
    let fx = Fixture::new(40);
    let mut m = OmniModel::<f64>::new(small_config(), 2).unwrap();
    let before = snapshot(&m);
    let cfg = StageConfig {
        lambda_unit: 0.0,
        ..quick(3)
    };
    let rep = train_stage(&mut m, Stage::Two, &cfg, fx.data(), 5, &mut |_| {}).unwrap();
    for l in &rep.lines {
        if let ReportLine::Step { unit, ctc, .. } = l {
            assert!(unit.is_none() && ctc.is_some());
        }
    }
    for name in changed(&before, &snapshot(&m)) {
        assert_ne!(group_of(&name).unwrap(), ParamGroup::Top, "{name}");
    }
}

#[test]
fn same_seed_same_curve() {
    let fx = Fixture::new(40);
    let run = || {
        let mut m = OmniModel::<f64>::new(small_config(), 3).unwrap();
        let r1 = train_stage(&mut m, Stage::One, &quick(4), fx.data(), 9, &mut |_| {}).unwrap();
        let r2 = train_stage(&mut m, Stage::Two, &quick(4), fx.data(), 9, &mut |_| {}).unwrap();
        (r1.losses(), r2.losses(), snapshot(&m))
    };
    assert_eq!(run(), run());
}

#[test]
fn stage_one_loss_falls() {
    let fx = Fixture::new(200);
    let mut m = OmniModel::<f64>::new(small_config(), 4).unwrap();
    let cfg = StageConfig {
        steps: 80,
        batch_size: 8,
        lr: 1e-2,
        ..quick(0)
    };
    let rep = train_stage(&mut m, Stage::One, &cfg, fx.data(), 0, &mut |_| {}).unwrap();
    let l = rep.losses();
    let tail = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * l[0], "first {} tail {tail}", l[0]);
    assert!(l.iter().all(|v| v.is_finite()));
}

#[test]
fn stage_one_needs_vision_records() {
    let mut fx = Fixture::new(60);
    fx.train.retain(|r| !r.task.has_vision());
    let mut m = OmniModel::<f64>::new(small_config(), 5).unwrap();
    let e = train_stage(&mut m, Stage::One, &quick(1), fx.data(), 0, &mut |_| {}).unwrap_err();
    assert!(e.to_string().contains("vision"), "{e}");
}

#[test]
fn empty_task_mix_is_rejected() {
    let fx = Fixture::new(20);
    let mut m = OmniModel::<f64>::new(small_config(), 6).unwrap();
    let cfg = StageConfig {
        tasks: Some(vec![]),
        ..quick(1)
    };
    assert!(train_stage(&mut m, Stage::Three, &cfg, fx.data(), 0, &mut |_| {}).is_err());
}

#[test]
fn single_task_stage_three_starts_like_stage_one() {
    let fx = Fixture::new(40);
    let cfg = StageConfig {
        tasks: Some(vec![Task::VT2T]),
        ..quick(3)
    };
    let mut a = OmniModel::<f64>::new(small_config(), 7).unwrap();
    let mut b = a.clone();
    let ra = train_stage(&mut a, Stage::Three, &cfg, fx.data(), 1, &mut |_| {}).unwrap();
    let rb = train_stage(&mut b, Stage::One, &cfg, fx.data(), 1, &mut |_| {}).unwrap();
    // same batches and loss; only the trainable sets differ (stage 3 keeps the projection)
    assert_eq!(ra.losses()[0], rb.losses()[0]);
    assert_eq!(a.params.vision.w1.data(), OmniModel::<f64>::new(small_config(), 7).unwrap().params.vision.w1.data());
    assert_ne!(b.params.vision.w1.data(), a.params.vision.w1.data());
}

#[test]
fn mismatched_world_is_rejected() {
    let fx = Fixture::new(10);
    let mut m = OmniModel::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    assert!(train_stage(&mut m, Stage::One, &quick(1), fx.data(), 0, &mut |_| {}).is_err());
}

#[test]
fn report_lines_round_trip_as_json() {
    let fx = Fixture::new(30);
    let mut m = OmniModel::<f64>::new(small_config(), 8).unwrap();
    let cfg = StageConfig {
        eval_samples: 4,
        ..quick(2)
    };
    let mut streamed = Vec::new();
    let rep = train_stage(&mut m, Stage::Two, &cfg, fx.data(), 0, &mut |l| streamed.push(l.clone())).unwrap();
    assert_eq!(streamed, rep.lines);
    let mut buf = Vec::new();
    rep.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let back: Vec<ReportLine> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, rep.lines);
    assert!(text.lines().next().unwrap().starts_with(r#"{"type":"step","stage":2"#));
    assert!(rep.metric("ASR", Metric::Wer).is_some());
    assert!(rep.metric("speech_out", Metric::UnitAccuracy).is_some());
}

#[test]
fn length_batches_cover_every_record_once() {
    let lens: Vec<usize> = (0..103).map(|i| (i * 37) % 20).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = length_batches(&lens, 8, &mut rng);
    let mut all: Vec<usize> = b.iter().flatten().copied().collect();
    all.sort();
    assert_eq!(all, (0..103).collect::<Vec<_>>());
    assert!(b.iter().all(|x| x.len() <= 8));
}

#[test]
fn config_toml_partial_and_round_trip() {
    let c = TrainConfig::from_toml("seed = 4\n[model]\nd_model = 32\n[stage2]\nsteps = 7\nlambda_unit = 0.5\n").unwrap();
    assert_eq!(c.seed, 4);
    assert_eq!(c.model.d_model, 32);
    assert_eq!(c.model.n_heads, ModelConfig::default().n_heads);
    assert_eq!(c.stage2.steps, 7);
    assert_eq!(c.stage2.lambda_unit, 0.5);
    assert_eq!(c.stage2.lambda_ctc, 1.0);
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert!(TrainConfig::from_toml("[stage1]\nlambda_text = -1.0\n").is_err());
    assert!(TrainConfig::from_toml("[stage1]\nbogus = 1\n").is_err());
    assert!(TrainConfig::from_toml("[stage3]\ntasks = []\n").is_err());
    let t = TrainConfig::from_toml("[stage3]\ntasks = [\"S2T\", \"VS2T\"]\n").unwrap();
    assert_eq!(t.stage3.tasks(Stage::Three), vec![Task::S2T, Task::VS2T]);
}

#[test]
fn ctc_gradient_matches_differences() {
    let opts = GradCheckOptions {
        tolerance: 1e-3,
        max_probes: 100,
        ..GradCheckOptions::default()
    };
    for seed in 0..5 {
        let r = ctc_gradcheck(5, 4, seed, &opts, None).unwrap();
        assert!(r.passed, "seed {seed}: {}", r.worst());
    }
    let bad = ctc_gradcheck(5, 4, 0, &opts, Some(OpKind::Custom)).unwrap();
    assert!(!bad.passed);
}

#[test]
fn full_model_gradient_matches_differences() {
    let opts = GradCheckOptions {
        tolerance: 1e-3,
        ..GradCheckOptions::default()
    };
    let reps = full_model_gradcheck(&ModelConfig::tiny(), 1, 2, &opts).unwrap();
    for r in &reps {
        assert!(r.passed, "{:?}", r.groups);
        assert_eq!(r.groups.len(), 6);
    }
    let check = FullModelCheck {
        config: ModelConfig::tiny(),
        seed: 1,
    };
    let bad = check.run(0, &opts, Some(OpKind::Attention)).unwrap();
    assert!(!bad.passed);
}

#[test]
fn teacher_windows_stay_inside_the_response() {
    let m = OmniModel::<f64>::new(small_config(), 9).unwrap();
    let h = Tensor::<f64>::zeros(&[6, 16]);
    let w = losses::teacher_windows(&m, &h, 2).unwrap();
    assert_eq!(w.len(), 7);
    assert!(w.iter().all(|&(s, e)| s >= 1 && s <= e && e <= 3));
}
