mod common;

use common::tiny;
use prunekit::io::*;
use prunekit::{Model, ModelConfig};
use proptest::prelude::*;

fn model() -> Model<f32> {
    Model::<f32>::build(tiny(2), 7).unwrap()
}

fn bits(m: &Model<f32>) -> Vec<u32> {
    m.params.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

/// Shapes read off the architecture, in the order weights are written. Every
/// projection is stored unit-major: one row per head channel or MLP neuron.
fn shape_walk(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, q, kv) = (c.d_model, c.num_heads * c.d_head, c.num_query_groups * c.d_head);
    let mut out = vec![("embedding".to_string(), vec![c.vocab_size, d])];
    for i in 0..c.num_layers {
        for (n, s) in [
            ("ln1.gamma", vec![d]),
            ("ln1.beta", vec![d]),
            ("attn.wq", vec![q, d]),
            ("attn.wk", vec![kv, d]),
            ("attn.wv", vec![kv, d]),
            ("attn.wo", vec![q, d]),
            ("ln2.gamma", vec![d]),
            ("ln2.beta", vec![d]),
            ("mlp.w1", vec![c.d_hidden, d]),
            ("mlp.w2", vec![c.d_hidden, d]),
        ] {
            out.push((format!("layers.{i}.{n}"), s));
        }
    }
    out.push(("final_norm.gamma".into(), vec![d]));
    out.push(("final_norm.beta".into(), vec![d]));
    if !c.tie_embeddings {
        out.push(("lm_head".into(), vec![c.vocab_size, d]));
    }
    out
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.mtrf"), dir.path().join("b.mtrf"));
    let m = model();
    save_checkpoint(&m, &a).unwrap();
    let back = load_checkpoint(&a).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(bits(&back), bits(&m));
    save_checkpoint(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 2, "no stray temp files");
}

#[test]
fn wide_weights_are_rounded_to_single_precision() {
    let m64 = common::random_model(tiny(1), 3);
    let back = decode_checkpoint(&encode_checkpoint(&m64)).unwrap();
    assert_eq!(bits(&back), bits(&m64.cast::<f32>()));
}

#[test]
fn directory_matches_shape_walk() {
    for cfg in [tiny(2), tiny(4), ModelConfig { tie_embeddings: true, ..ModelConfig::toy() }] {
        let dir = directory(&cfg);
        let walk = shape_walk(&cfg);
        assert_eq!(dir.len(), walk.len());
        let mut offset = 0u64;
        for (e, (name, shape)) in dir.iter().zip(&walk) {
            assert_eq!(&e.name, name);
            assert_eq!(&e.shape, shape);
            assert_eq!(e.dtype, "f32");
            assert_eq!(e.offset, offset);
            offset += shape.iter().product::<usize>() as u64 * 4;
        }
        let m = Model::<f32>::build(cfg, 1).unwrap();
        let bytes = encode_checkpoint(&m);
        let (header, start) = decode_header(&bytes).unwrap();
        assert_eq!(header.tensors, dir);
        assert_eq!((bytes.len() - start) as u64, offset);
    }
}

#[test]
fn corrupt_files_are_rejected_by_field() {
    let bytes = encode_checkpoint(&model());

    let mut flipped = bytes.clone();
    flipped[1] ^= 0x20;
    let err = decode_checkpoint(&flipped).unwrap_err();
    assert!(matches!(err, IoError::BadMagic { found } if &found == b"MtRF"));
    assert!(err.to_string().starts_with("magic"));

    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    let err = decode_checkpoint(&version).unwrap_err();
    assert!(matches!(err, IoError::UnsupportedVersion { found: 2, supported: 1 }));
    assert!(err.to_string().starts_with("version"));

    assert!(matches!(
        decode_checkpoint(&bytes[..10]).unwrap_err(),
        IoError::Truncated { field: "preamble", .. }
    ));
    assert!(matches!(
        decode_checkpoint(&bytes[..40]).unwrap_err(),
        IoError::Truncated { field: "header", .. }
    ));
    let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
    assert!(matches!(err, IoError::Truncated { .. }), "{err}");

    let (header, start) = decode_header(&bytes).unwrap();
    let rewrite = |h: &CheckpointHeader| {
        let json = serde_json::to_vec(h).unwrap();
        let mut out = b"MTRF".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[start..]);
        out
    };
    assert_eq!(bits(&decode_checkpoint(&rewrite(&header)).unwrap()), bits(&model()));

    let mut overlap = header.clone();
    overlap.tensors[2].offset = overlap.tensors[1].offset;
    assert!(matches!(decode_checkpoint(&rewrite(&overlap)).unwrap_err(), IoError::Directory(_)));
    let mut shape = header.clone();
    shape.tensors[4].shape.reverse();
    assert!(matches!(decode_checkpoint(&rewrite(&shape)).unwrap_err(), IoError::Directory(_)));
    let mut dtype = header.clone();
    dtype.tensors[0].dtype = "f16".into();
    assert!(matches!(decode_checkpoint(&rewrite(&dtype)).unwrap_err(), IoError::Directory(_)));
    let mut past_end = header.clone();
    past_end.tensors.last_mut().unwrap().offset += 4;
    assert!(decode_checkpoint(&rewrite(&past_end)).is_err());

    let missing = tempfile::tempdir().unwrap().path().join("nope.mtrf");
    assert!(matches!(load_checkpoint(&missing).unwrap_err(), IoError::Io { .. }));
}

#[test]
fn ingest_reads_bytes_and_documents() {
    let ds = ingest_str("ab", 0, SplitFractions::default()).unwrap();
    assert_eq!(ds.tokens, vec![97, 98]);
    assert_eq!(ds.manifest.vocab_size, 258);

    let text = "first doc\nline two\n\n\nsecond\n   \nthird é\n";
    let ds = ingest_str(text, 3, SplitFractions::default()).unwrap();
    assert_eq!(ds.manifest.documents.len(), 3);
    // Non-blank lines, newline included, one token per byte.
    let oracle: usize = text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.len() + 1).sum();
    assert_eq!(ds.tokens.len(), oracle);
    assert_eq!(ds.manifest.num_tokens, oracle);
    assert!(ds.tokens.iter().all(|&t| t < 256));

    assert!(matches!(ingest_str("\n \n", 0, SplitFractions::default()), Err(IoError::EmptyInput)));
}

#[test]
fn splits_are_deterministic_and_disjoint() {
    let text: String = (0..200).map(|i| format!("document number {i}\n\n")).collect();
    let f = SplitFractions { valid: 0.2, test: 0.1 };
    let a = ingest_str(&text, 11, f).unwrap();
    let b = ingest_str(&text, 11, f).unwrap();
    assert_eq!(a, b);
    let c = ingest_str(&text, 12, f).unwrap();
    assert_ne!(a.manifest.documents, c.manifest.documents);

    let total: usize = [Split::Train, Split::Valid, Split::Test].iter().map(|&s| a.split_tokens(s).len()).sum();
    assert_eq!(total, a.tokens.len());
    let count = |s| a.manifest.documents.iter().filter(|d| d.split == s).count();
    assert!((25..=55).contains(&count(Split::Valid)), "{}", count(Split::Valid));
    assert!((8..=35).contains(&count(Split::Test)), "{}", count(Split::Test));
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.bin");
    let ds = synthetic_corpus(40, 3, 5000, 8, 1, SplitFractions::default()).unwrap();
    ds.save(&path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 * 5000);
    assert!(TokenDataset::manifest_path(&path).exists());
    assert_eq!(TokenDataset::load(&path).unwrap(), ds);

    let raw = std::fs::read(&path).unwrap();
    let first = u32::from_le_bytes(raw[..4].try_into().unwrap());
    assert_eq!(first, ds.tokens[0]);

    let mut bad = raw.clone();
    bad[..4].copy_from_slice(&40u32.to_le_bytes());
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(TokenDataset::load(&path), Err(IoError::TokenOutOfRange { id: 40, vocab: 40 })));
    std::fs::write(&path, &raw[..raw.len() - 2]).unwrap();
    assert!(TokenDataset::load(&path).is_err());
}

#[test]
fn calibration_sampling() {
    let tokens: Vec<u32> = (0..1000).collect();
    let one = sample_calibration(&tokens, 1, 17, 3).unwrap();
    assert_eq!((one.batch, one.seq, one.ids.len()), (1, 17, 17));
    assert_eq!(one.ids[0] % 17, 0);
    assert!(one.ids.windows(2).all(|w| w[1] == w[0] + 1));

    assert_eq!(sample_calibration(&tokens, 8, 10, 5).unwrap(), sample_calibration(&tokens, 8, 10, 5).unwrap());

    let all = sample_calibration(&tokens, 100, 10, 1).unwrap();
    let mut starts: Vec<u32> = (0..100).map(|b| all.row(b)[0]).collect();
    starts.sort_unstable();
    assert_eq!(starts, (0..100).map(|i| i * 10).collect::<Vec<_>>(), "without replacement");

    assert!(matches!(
        sample_calibration(&tokens, 101, 10, 1),
        Err(IoError::InsufficientData { requested: 101, seq_len: 10, available: 100 })
    ));
}

#[test]
fn distinct_seeds_rarely_collide() {
    // One window out of W per draw, so two independent seeds agree with
    // probability 1/W. Over 100 pairs the collision count is Binomial(100, 1/W).
    let w = 50;
    let tokens: Vec<u32> = (0..w as u32 * 4).collect();
    let collisions = (0..100u64)
        .filter(|&s| sample_calibration(&tokens, 1, 4, 2 * s).unwrap() == sample_calibration(&tokens, 1, 4, 2 * s + 1).unwrap())
        .count();
    // Expected 2; P(X > 10) < 1e-5.
    assert!(collisions <= 10, "{collisions} collisions");
}

proptest! {
    #[test]
    fn calibration_windows_are_disjoint_slices(n in 1usize..20, seq in 1usize..16, seed in any::<u64>()) {
        let tokens: Vec<u32> = (0..400).collect();
        prop_assume!(n * seq <= 400);
        let b = sample_calibration(&tokens, n, seq, seed).unwrap();
        let mut starts: Vec<u32> = (0..n).map(|i| b.row(i)[0]).collect();
        for i in 0..n {
            let r = b.row(i);
            prop_assert_eq!(r[0] as usize % seq, 0);
            prop_assert!(r.windows(2).all(|w| w[1] == w[0] + 1));
        }
        starts.sort_unstable();
        starts.dedup();
        prop_assert_eq!(starts.len(), n);
    }

    #[test]
    fn any_text_tokenizes_to_its_bytes(s in "[a-z \\n]{0,80}") {
        match ingest_str(&s, 0, SplitFractions::default()) {
            Ok(ds) => {
                let oracle: usize = s.lines().filter(|l| !l.trim().is_empty()).map(|l| l.len() + 1).sum();
                let trailing = usize::from(!s.ends_with('\n') && s.lines().last().is_some_and(|l| !l.trim().is_empty()));
                prop_assert_eq!(ds.tokens.len(), oracle - trailing);
            }
            Err(e) => prop_assert!(matches!(e, IoError::EmptyInput)),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        seed in any::<u32>(),
        steps in 0usize..5000,
        lr in 1e-6f64..1e-1,
        tol in 0.0f64..0.5,
        valid in 0.0f64..0.3,
    ) {
        let overrides = vec![
            format!("seed={seed}"),
            format!("train.steps={steps}"),
            format!("train.lr_max={lr:e}"),
            format!("search.tolerance={tol}"),
            format!("data.splits.valid={valid}"),
        ];
        let cfg = PipelineConfig::toy_with(&overrides).unwrap();
        prop_assert_eq!(cfg.train.steps, steps);
        let text = cfg.to_toml();
        let back = PipelineConfig::from_toml(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_toml(), text);
    }
}
