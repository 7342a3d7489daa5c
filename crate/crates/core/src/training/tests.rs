use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::*;
use crate::model::{ModelConfig, Preset};
use crate::synthdata::{generate_dataset, DataPreset};
use crate::tensor::{GradFault, Shape};

fn random(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn store(entries: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(*n, t.clone()).unwrap();
    }
    s
}

fn micro_examples(count: usize, seed: u64) -> Vec<Example<f64>> {
    let seqs = generate_dataset(DataPreset::Extrapolate, 8, count, seed).unwrap();
    Example::from_sequences(&seqs, &Task::Extrapolate { inputs: 4, targets: 1 }).unwrap()
}

fn micro_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed: 3,
        schedule: Schedule {
            base_lr: 1e-3,
            ..Schedule::default()
        },
        ..TrainConfig::default()
    }
}

fn micro_model() -> ConvTransformer {
    ConvTransformer::new(ModelConfig::micro()).unwrap()
}

fn eval_mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = mse_loss(&mut g, x, y).unwrap();
    g.value(l).item()
}

#[test]
fn mse_examples() {
    let s = Shape::new(2, 3, 4, 4);
    let a = random(s, 1);
    assert_eq!(eval_mse(&a, &a), 0.0);
    assert_eq!(eval_mse(&Tensor::full(s, 1.0), &Tensor::zeros(s)), 1.0);
    let b = random(s, 2);
    let mut acc = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        acc += (x - y) * (x - y);
    }
    assert!((eval_mse(&a, &b) - acc / a.numel() as f64).abs() < 1e-12);
}

#[test]
fn mse_rejects_shape_mismatch() {
    let mut g = Graph::new();
    let a = g.constant(random(Shape::new(1, 3, 2, 2), 1));
    let b = g.constant(random(Shape::new(2, 3, 2, 2), 1));
    assert!(mse_loss(&mut g, a, b).is_err());
}

#[test]
fn schedule_examples() {
    let s = Schedule::default();
    assert_eq!(s.lr_at(0), 1e-4);
    assert!((s.lr_at(20_000) - 9.5e-5).abs() < 1e-18);
    assert!((s.lr_at(40_000) - 1e-4 * 0.9025).abs() < 1e-18);
    let stepwise = Schedule {
        kind: DecayKind::Stepwise,
        ..s
    };
    assert_eq!(stepwise.lr_at(19_999), 1e-4);
    assert!(s.lr_at(10_000) < 1e-4 && s.lr_at(10_000) > 9.5e-5);
}

#[test]
fn adam_zero_grads_leave_params() {
    let mut p = store(&[("a", random(Shape::new(1, 1, 2, 2), 4))]);
    let before = p.clone();
    let mut st = OptimState::new(&p, Schedule::default(), AdamConfig::default());
    adam_step(&mut p, &[Some(Tensor::zeros(Shape::new(1, 1, 2, 2)))], &mut st).unwrap();
    assert_eq!(p, before);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = store(&[("w", Tensor::scalar(0.0))]);
    let mut st = OptimState::new(&p, Schedule::default(), AdamConfig::default());
    adam_step(&mut p, &[Some(Tensor::scalar(1.0))], &mut st).unwrap();
    // m_hat = v_hat = 1
    let expect = -1e-4 / (1.0 + 1e-8);
    assert!((p.get("w").unwrap().item() - expect).abs() < 1e-18);
}

#[test]
fn adam_updates_parameters_independently() {
    let mut p = store(&[("a", Tensor::scalar(1.0)), ("b", Tensor::scalar(1.0))]);
    let mut st = OptimState::new(&p, Schedule::default(), AdamConfig::default());
    adam_step(&mut p, &[Some(Tensor::scalar(0.5)), Some(Tensor::scalar(0.0))], &mut st).unwrap();
    assert!(p.get("a").unwrap().item() < 1.0);
    assert_eq!(p.get("b").unwrap().item(), 1.0);
}

#[test]
fn adam_missing_grad_names_parameter() {
    let mut p = store(&[("a", Tensor::scalar(1.0)), ("encoder0.ff.conv0.bias", Tensor::scalar(1.0))]);
    let mut st = OptimState::new(&p, Schedule::default(), AdamConfig::default());
    match adam_step(&mut p, &[Some(Tensor::scalar(0.5)), None], &mut st) {
        Err(Error::MissingGrad(name)) => assert_eq!(name, "encoder0.ff.conv0.bias"),
        other => panic!("expected missing grad, got {other:?}"),
    }
    assert_eq!(st.step, 0);
}

#[test]
fn task_layouts() {
    let t = Task::Interpolate { inputs: 6 };
    assert_eq!(t.layout(13).unwrap(), (vec![0, 2, 4, 8, 10, 12], vec![5, 6, 7]));
    assert!(t.layout(12).is_err());
    let e = Task::Extrapolate { inputs: 4, targets: 2 };
    assert_eq!(e.layout(6).unwrap(), (vec![0, 1, 2, 3], vec![4, 5]));
    assert!(e.layout(5).is_err());
}

#[test]
fn interpolation_examples_query_the_target_positions() {
    let seqs = generate_dataset(DataPreset::Interpolate, 8, 1, 2).unwrap();
    let ex = Example::<f64>::from_sequence(&seqs[0], &Task::Interpolate { inputs: 6 }).unwrap();
    let (_, target_pos) = seqs[0].select(&[5, 6, 7]);
    assert_eq!(ex.request.query_positions, target_pos);
    assert_eq!(ex.target.shape().n, 3);
}

#[test]
fn batch_order_covers_each_epoch() {
    let len = 7;
    let mut seen: Vec<usize> = (0..len as u64).flat_map(|s| batch_indices(11, s, 1, len)).collect();
    seen.sort();
    assert_eq!(seen, (0..len).collect::<Vec<_>>());
    assert_eq!(batch_indices(11, 5, 3, len), batch_indices(11, 5, 3, len));
}

#[test]
fn zero_steps_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = micro_examples(2, 1);
    let (trainer, report) = train(micro_model(), micro_config(0), &data, &[], Some(dir.path())).unwrap();
    assert!(report.records.is_empty());
    let path = report.final_checkpoint.unwrap();
    let ck = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(&ck.params, trainer.params());
    assert!(dir.path().join("report.tsv").exists());
}

#[test]
fn same_seed_gives_identical_losses() {
    let data = micro_examples(3, 1);
    let run = || train(micro_model(), micro_config(4), &data, &[], None).unwrap().1;
    let (a, b) = (run(), run());
    assert_eq!(a.losses().len(), 4);
    let bits = |r: &TrainReport| r.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = micro_examples(3, 1);
    let (_, full) = train(micro_model(), micro_config(6), &data, &[], None).unwrap();
    let (first, _) = train(micro_model(), micro_config(3), &data, &[], Some(dir.path())).unwrap();
    let ck = Checkpoint::<f64>::load(&dir.path().join("final.cvtx")).unwrap();
    let mut resumed = Trainer::from_checkpoint(ck, micro_config(6)).unwrap();
    assert_eq!(resumed.params(), first.params());
    let rest = resumed.run(&data, &[], 6, None).unwrap();
    let tail: Vec<u64> = full.losses()[3..].iter().map(|l| l.to_bits()).collect();
    assert_eq!(rest.losses().iter().map(|l| l.to_bits()).collect::<Vec<_>>(), tail);
    let (fresh, _) = train(micro_model(), micro_config(6), &data, &[], None).unwrap();
    assert_eq!(fresh.params(), resumed.params());
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let mut data = micro_examples(1, 1);
    data[0].target.data_mut()[0] = f64::NAN;
    match train(micro_model(), micro_config(3), &data, &[], None) {
        Err(Error::NonFiniteLoss { step, last_checkpoint }) => {
            assert_eq!(step, 1);
            assert!(last_checkpoint.is_none());
        }
        other => panic!("expected abort, got {:?}", other.map(|r| r.1)),
    }
}

#[test]
fn report_marks_missing_metrics() {
    let data = micro_examples(2, 1);
    let cfg = TrainConfig {
        eval_every: 2,
        ..micro_config(3)
    };
    let (_, report) = train(micro_model(), cfg, &data, &data, None).unwrap();
    let tsv = report.to_tsv();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "# loss = mse");
    assert_eq!(lines[1], "step\tloss\tlr\tpsnr\tssim");
    assert!(lines[2].ends_with("\t-\t-"));
    assert!(lines[3].ends_with("\t-") && !lines[3].ends_with("\t-\t-"));
    assert!(report.records[1].psnr.is_some() && report.records[2].psnr.is_some());
    // 8x8 frames are below the SSIM window
    assert!(report.records[2].ssim.is_none());
}

#[test]
fn linear_graph_gradcheck_is_exact() {
    let inputs = vec![
        ("x".to_string(), random(Shape::new(1, 2, 3, 3), 1)),
        ("y".to_string(), random(Shape::new(1, 2, 3, 3), 2)),
    ];
    let r = check_gradients(
        &inputs,
        |g, v| {
            let s = g.scale(v[0], 3.0);
            let t = g.add(s, v[1])?;
            Ok(g.sum(t))
        },
        0,
        &GradcheckOptions {
            coords: 36,
            step: 0.5,
            ..GradcheckOptions::default()
        },
    )
    .unwrap();
    assert_eq!(r.coords, 36);
    assert!(r.max_rel_error() < 1e-10, "{:?}", r.worst);
}

#[test]
fn micro_model_gradcheck() {
    let r = gradcheck(&Preset::Micro.config(), 7, &GradcheckOptions::default()).unwrap();
    assert!(r.coords >= 200);
    assert_eq!(r.tensors, micro_model().layout().len());
    assert!(r.max_rel_error() < 1e-4, "{:?}", r.worst);
}

#[test]
fn corrupted_conv_backward_is_detected() {
    let opts = GradcheckOptions {
        fault: Some(GradFault::ScaleConvKernelGrad(1.5)),
        ..GradcheckOptions::default()
    };
    let r = gradcheck(&Preset::Micro.config(), 7, &opts).unwrap();
    assert!(r.max_rel_error() > 1e-2);
    match r.check(1e-3) {
        Err(Error::GradCheck { offenders, .. }) => assert!(offenders.iter().any(|n| n.ends_with("weight"))),
        other => panic!("expected failure, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn schedule_is_non_increasing(a in 0u64..200_000, d in 0u64..200_000) {
        let s = Schedule::default();
        prop_assert!(s.lr_at(a + d) <= s.lr_at(a));
    }

    #[test]
    fn adam_keeps_moment_shapes(steps in 1usize..5, seed in any::<u64>()) {
        let shapes = [Shape::new(2, 1, 1, 3), Shape::new(1, 1, 1, 1)];
        let mut p = store(&[("a", random(shapes[0], seed)), ("b", random(shapes[1], seed ^ 1))]);
        let mut st = OptimState::new(&p, Schedule::default(), AdamConfig::default());
        for k in 0..steps {
            let grads: Vec<_> = shapes.iter().enumerate().map(|(i, &s)| Some(random(s, seed ^ (k * 2 + i) as u64))).collect();
            let before = st.step;
            adam_step(&mut p, &grads, &mut st).unwrap();
            prop_assert_eq!(st.step, before + 1);
        }
        for ((_, t), ((_, m), (_, v))) in p.iter().zip(st.m.iter().zip(st.v.iter())) {
            prop_assert_eq!(t.shape(), m.shape());
            prop_assert_eq!(t.shape(), v.shape());
        }
    }
}
