use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::*;
use crate::denoiser::Denoiser;
use crate::lm::Lm;
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

fn small() -> Config {
    let mut c = Config::default();
    c.synth.grid_rows = 2;
    c.synth.grid_cols = 3;
    c.synth.dim = 8;
    c.synth.bank_size = 6;
    c.synth.complexity_weights = BTreeMap::from([(2, 1.0), (3, 1.0)]);
    c.tokenizer.grid_rows = 2;
    c.tokenizer.grid_cols = 3;
    c.tokenizer.dim = 8;
    c.tokenizer.codebook_size = 8;
    c.tokenizer.blocks = 1;
    c.tokenizer.ffn_hidden = 16;
    c.tokenizer.selector_hidden = 8;
    c.denoiser.hidden = 12;
    c.denoiser.time_dim = 4;
    c.lm.d_model = 8;
    c.lm.blocks = 1;
    c.lm.ffn_hidden = 16;
    c.lm.context = 16;
    c
}

fn bits32(t: &[(String, Tensor<f32>)]) -> Vec<(String, Vec<u32>)> {
    t.iter()
        .map(|(n, v)| (n.clone(), v.data().iter().map(|x| x.to_bits()).collect()))
        .collect()
}

#[test]
fn default_config_is_valid_and_round_trips() {
    let c = Config::default();
    c.validate().unwrap();
    let back = Config::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(Config::from_json(&json).unwrap(), c);
    assert_eq!(Config::from_toml("").unwrap(), c);
}

#[test]
fn config_rejects_unknown_keys_and_bad_ranges() {
    assert!(Config::from_toml("bogus = 1").is_err());
    assert!(Config::from_toml("[tokenizer]\nbogus = 1").is_err());
    assert!(Config::from_toml("[tokenizer]\nrho = 0.0").is_err());
    assert!(Config::from_toml("[lm]\nmix_ratio = 2.0").is_err());
    assert!(Config::from_toml("[generate]\ntop_k = 0").is_err());
    assert!(
        Config::from_toml("[tokenizer]\ndim = 8").is_err(),
        "dim must match the corpus"
    );
    assert!(
        Config::from_toml("[lm]\ncontext = 8").is_err(),
        "context shorter than a sequence"
    );
    let c = Config::from_toml("seed = 9\n[tokenizer]\nattn_mode = \"bidirectional\"\n[synth.complexity_weights]\n2 = 0.5\n8 = 0.5").unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.synth.complexity_weights.len(), 2);
}

#[test]
fn config_load_picks_format_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("c.toml");
    std::fs::write(&t, "seed = 4").unwrap();
    assert_eq!(Config::load(&t).unwrap().seed, 4);
    let j = dir.path().join("c.json");
    std::fs::write(&j, "{\"seed\": 5}").unwrap();
    assert_eq!(Config::load(&j).unwrap().seed, 5);
    assert!(Config::load(&dir.path().join("missing.toml")).is_err());
}

#[test]
fn digest_tracks_stage_scope() {
    let a = Config::default();
    let mut b = a.clone();
    b.lm.steps += 1;
    assert_eq!(
        a.stage_digest(Stage::Tokenizer),
        b.stage_digest(Stage::Tokenizer)
    );
    assert_ne!(a.stage_digest(Stage::Lm), b.stage_digest(Stage::Lm));
    b.tokenizer.rho = 0.5;
    assert_ne!(
        a.stage_digest(Stage::Tokenizer),
        b.stage_digest(Stage::Tokenizer)
    );
    assert_ne!(
        a.stage_digest(Stage::Denoiser),
        b.stage_digest(Stage::Denoiser)
    );
}

#[test]
fn tokenizer_checkpoint_round_trip_is_bit_exact() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tok = Tokenizer::<f32>::new(cfg.tokenizer.clone(), &mut rng).unwrap();
    tok.codebook.usage_counts[2] = 17;
    tok.codebook.ema_cluster_size[1] = 0.123456789;
    tok.codebook.idle_steps[0] = 5;
    tok.codebook.initialized = true;
    save_tokenizer(&path, &tok, &cfg, 42).unwrap();
    let (back, step) = load_tokenizer::<f32>(&path, &cfg).unwrap();
    assert_eq!(step, 42);
    assert_eq!(
        bits32(&back.store.named_values()),
        bits32(&tok.store.named_values())
    );
    assert_eq!(back.codebook, tok.codebook);
    assert!(!dir.path().join("tok.tmp").exists());

    let mut other = cfg.clone();
    other.tokenizer.lambda = 3.0;
    assert!(matches!(
        load_tokenizer::<f32>(&path, &other),
        Err(crate::Error::Digest { .. })
    ));
    assert!(load_lm::<f32>(&path, &cfg).is_err(), "stage mismatch");
    assert!(
        load_tokenizer::<f64>(&path, &cfg).is_err(),
        "dtype mismatch"
    );
}

#[test]
fn denoiser_and_lm_checkpoints_round_trip() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let den = Denoiser::<f32>::new(cfg.denoiser.clone(), 48, 48, &mut rng).unwrap();
    let p = dir.path().join("den.ckpt");
    save_denoiser(&p, &den, &cfg, 7).unwrap();
    let (back, step) = load_denoiser::<f32>(&p, &cfg).unwrap();
    assert_eq!(step, 7);
    assert_eq!(
        bits32(&back.store.named_values()),
        bits32(&den.store.named_values())
    );

    let lm = Lm::<f32>::new(cfg.lm.clone(), cfg.vocabulary().unwrap(), 8, &mut rng).unwrap();
    let p = dir.path().join("lm.ckpt");
    save_lm(&p, &lm, &cfg, 3).unwrap();
    let (back, _) = load_lm::<f32>(&p, &cfg).unwrap();
    assert_eq!(
        bits32(&back.store.named_values()),
        bits32(&lm.store.named_values())
    );
}

#[test]
fn f64_checkpoint_round_trip() {
    let ck = Checkpoint {
        stage: Stage::Lm,
        digest: [7; 32],
        step: u64::MAX,
        tensors: vec![
            (
                "a".into(),
                TensorData::F64(
                    Tensor::from_f64(&[2, 2], &[0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap(),
                ),
            ),
            ("s".into(), TensorData::F32(Tensor::scalar(3.5f32))),
        ],
    };
    let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
    assert_eq!(back.step, u64::MAX);
    let (TensorData::F64(a), TensorData::F64(b)) = (&ck.tensors[0].1, &back.tensors[0].1) else {
        panic!("dtype changed");
    };
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(back.tensors[1], ck.tensors[1]);
}

#[test]
fn corrupt_checkpoints_give_structured_errors() {
    let ck = Checkpoint {
        stage: Stage::Tokenizer,
        digest: [0; 32],
        step: 1,
        tensors: vec![(
            "w".into(),
            TensorData::F32(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()),
        )],
    };
    let bytes = ck.encode().unwrap();
    for cut in 0..bytes.len() {
        let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, crate::Error::Format { .. }), "{err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::decode(&bad)
        .unwrap_err()
        .to_string()
        .contains("LVTCKPT1"));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(Checkpoint::decode(&bad)
        .unwrap_err()
        .to_string()
        .contains("version"));
    let mut bad = bytes.clone();
    bad.push(0);
    assert!(Checkpoint::decode(&bad).is_err());
}

#[derive(Serialize)]
struct Rec {
    step: usize,
    loss: f64,
    name: &'static str,
}

#[test]
fn jsonl_lines_have_sorted_keys() {
    let mut w = MetricsWriter::new(Vec::new(), MetricsFormat::Jsonl);
    for step in 0..10 {
        w.write(&Rec {
            step,
            loss: 0.5,
            name: "a",
        })
        .unwrap();
    }
    assert_eq!(w.lines(), 10);
    let text = String::from_utf8(w.into_inner()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[3], r#"{"loss":0.5,"name":"a","step":3}"#);
    for l in lines {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
}

#[test]
fn csv_header_written_once() {
    let mut w = MetricsWriter::new(Vec::new(), MetricsFormat::Csv);
    for step in 0..3 {
        w.write(&Rec {
            step,
            loss: 1.25,
            name: "x,y",
        })
        .unwrap();
    }
    let text = String::from_utf8(w.into_inner()).unwrap();
    assert_eq!(
        text,
        "loss,name,step\n1.25,\"x,y\",0\n1.25,\"x,y\",1\n1.25,\"x,y\",2\n"
    );

    let mut w = MetricsWriter::new(Vec::new(), MetricsFormat::Csv);
    w.write(&Rec {
        step: 0,
        loss: 1.0,
        name: "a",
    })
    .unwrap();
    assert!(w.write(&serde_json::json!({"other": 1})).is_err());
    assert!(w.write(&serde_json::json!({"nested": {"a": 1}})).is_err());
    assert!(w.write(&3).is_err());
    assert!("yaml".parse::<MetricsFormat>().is_err());
    assert_eq!("csv".parse::<MetricsFormat>().unwrap(), MetricsFormat::Csv);
}
