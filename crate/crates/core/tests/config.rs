use mumtaffect::config::*;
use mumtaffect::data::Modality;

#[test]
fn empty_file_gives_defaults() {
    let c = parse_config_str("", "c.cfg").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.model.enc.d_model, 64);
    assert_eq!(c.model.fusion.d_model, 128);
    assert_eq!(c.train.multitask.alpha, 0.3);
    assert_eq!(c.train.multitask.gamma, 0.95);
}

#[test]
fn sections_and_prefixes() {
    let text = "\
# experiment
[model]
enc.heads = 4
modalities = eye, au   ; inline comment
use_stim_emo = false

[train]
alpha_multitask = 0.25
class_weights_valence = [1, 2, 3]

[data]
holdout = trial
dir = \"some dir\"
";
    let c = parse_config_str(text, "c.cfg").unwrap();
    assert_eq!(c.model.enc.heads, 4);
    assert_eq!(c.model.enabled_modalities, vec![Modality::Eye, Modality::Au]);
    assert!(!c.model.use_stim_emo);
    assert_eq!(c.train.multitask.alpha, 0.25);
    assert_eq!(c.train.class_weights.unwrap().valence, [1.0, 2.0, 3.0]);
    assert_eq!(c.data.holdout, Holdout::Trial);
    assert_eq!(c.data.dir, "some dir");

    let c = parse_config_str("train.patience = 9\nfusion.ffn_dim = 512\n", "c.cfg").unwrap();
    assert_eq!(c.train.patience, 9);
    assert_eq!(c.model.fusion.ffn_dim, 512);
}

fn err(text: &str) -> String {
    parse_config_str(text, "c.cfg").unwrap_err().to_string()
}

#[test]
fn indivisible_heads_rejected_with_line() {
    let e = err("\n\nfusion.heads=5\n");
    assert!(e.starts_with("c.cfg:3:"), "{e}");
    assert!(e.contains("divisible"), "{e}");
}

#[test]
fn alpha_out_of_range_rejected_with_line() {
    let e = err("train.alpha_multitask=1.5");
    assert!(e.starts_with("c.cfg:1:"), "{e}");
    assert!(e.contains("out of range"), "{e}");
}

#[test]
fn unknown_keys_and_bad_types_are_errors() {
    assert!(err("[model]\nfusion.head = 4").contains("c.cfg:2: unknown key `model.fusion.head`"));
    assert!(err("[trian]").contains("unknown section"));
    assert!(err("train.batch_size = many").contains("c.cfg:1:"));
    assert!(err("train.batch_size = 1").contains("at least 2"));
    assert!(err("use_stim_emo = maybe").contains("true or false"));
    assert!(err("modalities = eye, ecg").contains("c.cfg:1:"));
    assert!(err("just words").contains("key = value"));
    assert!(err("data.test_frac = 0.6\ndata.val_frac = 0.5").contains("below 1"));
}

#[test]
fn effective_config_reads_back() {
    let text = "enc.heads = 4\ntrain.gamma_finetune = 0.9\ntrain.class_weights_arousal = 1,1,2\ndata.seed = 3\n";
    let c = parse_config_str(text, "c.cfg").unwrap();
    let echoed = effective_config(&c);
    assert_eq!(parse_config_str(&echoed, "echo").unwrap(), c);
    let d = RunConfig::default();
    assert_eq!(parse_config_str(&effective_config(&d), "echo").unwrap(), d);
}

#[test]
fn seed_override() {
    let mut c = RunConfig::default();
    apply_seed_override(&mut c, Some("77")).unwrap();
    assert_eq!((c.train.seed, c.data.seed), (77, 77));
    apply_seed_override(&mut c, None).unwrap();
    assert_eq!(c.train.seed, 77);
    assert!(apply_seed_override(&mut c, Some("x")).is_err());
}
