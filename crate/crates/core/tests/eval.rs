mod support;

use mumtaffect::data::{Modality, ProcessedTrial};
use mumtaffect::eval::*;
use mumtaffect::model::MuMTAffect;
use mumtaffect::train::TrainConfig;
use proptest::prelude::*;

#[test]
fn f1_examples() {
    let s = f1_scores(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
    assert_eq!(s.macro_f1, 1.0);
    assert_eq!(s.per_class, vec![1.0; 3]);

    let s = f1_scores(&[0, 1, 1, 2], &[0, 0, 1, 2], 3).unwrap();
    assert!((s.per_class[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((s.per_class[1] - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(s.per_class[2], 1.0);
    assert!((s.macro_f1 - 7.0 / 9.0).abs() < 1e-12);
    assert!(s.undefined.is_empty());

    let s = f1_scores(&[0, 1], &[1, 0], 3).unwrap();
    assert_eq!(s.per_class[2], 0.0);
    assert_eq!(s.undefined, vec![2]);

    assert!(matches!(f1_scores(&[0], &[0, 1], 3), Err(EvalError::Length { .. })));
    assert!(f1_scores(&[], &[], 3).is_err());
    assert!(f1_scores(&[3], &[0], 3).is_err());
}

#[test]
fn constant_predictor_scores_only_its_class() {
    let s = f1_scores(&[1; 6], &[0, 1, 2, 0, 1, 2], 3).unwrap();
    assert_eq!(s.per_class[0], 0.0);
    assert!(s.per_class[1] > 0.0);
    assert_eq!(s.per_class[2], 0.0);
}

#[test]
fn r2_examples() {
    assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
    assert_eq!(r2_score(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    assert!((r2_score(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap() - 0.5).abs() < 1e-12);
    assert!(matches!(r2_score(&[1.0, 2.0], &[3.0, 3.0]), Err(EvalError::UndefinedVariance)));
    assert!(r2_score(&[1.0], &[1.0]).is_err());
    assert!(r2_score(&[1.0, 2.0], &[1.0]).is_err());
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
    assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
}

proptest! {
    #[test]
    fn r2_ignores_pair_order(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..30), rot in 0usize..30) {
        let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        prop_assume!(t.iter().any(|v| (v - t[0]).abs() > 1e-6));
        let mut rotated = pairs.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        rotated.reverse();
        let (p2, t2): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
        let a = r2_score(&p, &t).unwrap();
        let b = r2_score(&p2, &t2).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn macro_is_mean_of_classes(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..50)) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let s = f1_scores(&p, &l, 3).unwrap();
        prop_assert!((s.macro_f1 - s.per_class.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        prop_assert!(s.per_class.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn default_cells_mirror_the_grid() {
    let cells = default_cells();
    assert_eq!(cells.len(), 10);
    assert_eq!(cells[0].modalities, Modality::ALL.to_vec());
    assert!(cells[0].stim_emo && !cells[1].stim_emo);
    assert_eq!(cells[9].modalities, vec![Modality::Eye, Modality::Pupil, Modality::Au]);
}

fn quick() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.pretrain.epochs = 1;
    cfg.multitask.epochs = 1;
    cfg.finetune.epochs = 1;
    cfg.batch_size = 4;
    cfg
}

#[test]
fn evaluation_is_pure_and_repeatable() {
    let data = support::trials(3, 3, 4);
    let refs: Vec<&ProcessedTrial> = data.iter().collect();
    let model = MuMTAffect::new(support::tiny_config(), 2).unwrap();
    let before: Vec<_> = model.params.entries().iter().map(|e| e.tensor.clone()).collect();
    let a = evaluate_model(&model, &refs, 4).unwrap();
    let b = evaluate_model(&model, &refs, 4).unwrap();
    assert_eq!(a, b);
    let after: Vec<_> = model.params.entries().iter().map(|e| e.tensor.clone()).collect();
    assert_eq!(before, after);
    assert_eq!(a.n_trials, 9);
    assert!((a.avg_f1 - (a.valence.macro_f1 + a.arousal.macro_f1) / 2.0).abs() < 1e-12);
    assert!(a.r2.values().all(Option::is_some));
    assert!(evaluate_model(&model, &[], 4).is_err());
}

#[test]
fn grid_rows_match_cells_and_repeat() {
    let data = support::trials(3, 4, 6);
    let refs: Vec<&ProcessedTrial> = data.iter().collect();
    let grid = GridData {
        train: &refs[..8],
        val: &refs[8..10],
        test: &refs[10..],
    };
    let cells = vec![
        Cell {
            modalities: Modality::ALL.to_vec(),
            stim_emo: true,
            emotion_only: false,
        },
        Cell {
            modalities: vec![Modality::Eye, Modality::Au],
            stim_emo: false,
            emotion_only: true,
        },
    ];
    let run = || {
        let rows = ablation_grid(&grid, &support::tiny_config(), &quick(), &cells, 3, &mut |_| {}).unwrap();
        grid_csv(&rows)
    };
    let a = run();
    assert_eq!(a, run());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], GRID_HEADER);
    assert!(lines[1].starts_with("yes,1,1,1,1,"));
    assert!(lines[2].starts_with("no,1,0,1,0,"));
    assert_eq!(lines[1].split(',').count(), 13);
    assert!(!a.contains('\r'));

    let empty = vec![Cell {
        modalities: vec![],
        stim_emo: true,
        emotion_only: false,
    }];
    assert!(matches!(
        ablation_grid(&grid, &support::tiny_config(), &quick(), &empty, 3, &mut |_| {}),
        Err(EvalError::EmptyCell(0))
    ));
}
