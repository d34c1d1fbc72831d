use oscar_kv::analysis::{self, Condition, Scheme, StateTag, StudySpec};
use oscar_kv::datagen::{self, Dtype, TniSpec};
use oscar_kv::pipeline::{decode_step, model_for, prefill, ModelStub};
use oscar_kv::simulate::{self, SimConfig};
use oscar_kv::tensor::Matrix;
use oscar_kv::{BitWidth, KvCache, Method, PipelineConfig, SeededRng};

fn random_matrix(rng: &mut SeededRng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.normal() * scale)
}

fn random_model(rng: &mut SeededRng, d_model: usize, heads: usize, d: usize) -> ModelStub {
    let w = heads * d;
    let s = 1.0 / (d_model as f64).sqrt();
    ModelStub::new(
        random_matrix(rng, d_model, w, s),
        random_matrix(rng, d_model, w, s),
        random_matrix(rng, d_model, w, s),
        random_matrix(rng, w, d_model, 1.0 / (w as f64).sqrt()),
        heads,
        d,
    )
    .unwrap()
}

#[test]
fn tensor_files_feed_the_error_study() {
    let dir = tempfile::tempdir().unwrap();
    let (k, ann) = datagen::generate(&TniSpec::key_pattern(128, 2, 64, 3)).unwrap();
    let (v, _) = datagen::generate(&TniSpec::value_pattern(128, 2, 64, 3)).unwrap();
    let kp = dir.path().join("k.kvt");
    let vp = dir.path().join("v.kvt");
    datagen::write_file(&kp, &k, &ann, Dtype::F64).unwrap();
    datagen::write_file(&vp, &v, &ann, Dtype::F64).unwrap();
    let (k2, ann2) = datagen::read_file(&kp).unwrap();
    let (v2, _) = datagen::read_file(&vp).unwrap();
    assert_eq!(k2, k);
    assert_eq!(ann2, ann);
    let spec = StudySpec {
        bits: vec![BitWidth::new(2).unwrap(), BitWidth::new(4).unwrap()],
        group_size: 32,
        outlier_tokens: ann2.outlier_tokens.clone(),
        modality_blocks: ann2.modality_blocks.clone(),
    };
    let r = analysis::error_study(&k2, &v2, &spec).unwrap();
    let get = |b, c| r.get(b, Scheme::PerChannelK, c, "all").unwrap();
    assert!(get(2, Condition::WithOutliers) > get(2, Condition::WithoutOutliers));
    assert!(get(4, Condition::WithOutliers) < get(2, Condition::WithOutliers));
    let profile = analysis::tni_profile(&k2, StateTag::Key);
    let mut bottom = profile.bottom_k(ann2.outlier_tokens.len());
    bottom.sort_unstable();
    assert_eq!(bottom, ann2.outlier_tokens);
}

#[test]
fn dumped_cache_resumes_decoding_identically() {
    let mut rng = SeededRng::new(21);
    let (heads, d, d_model) = (2, 32, 32);
    let m = random_model(&mut rng, d_model, heads, d);
    let cfg = PipelineConfig::new(Method::Oscar, heads, d).with_group(16, 32);
    let mm = model_for(&m, &cfg).unwrap();
    let prompt = random_matrix(&mut rng, 75, d_model, 1.0);
    let (mut live, _) = prefill(&mm, &prompt, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    live.dump(dir.path()).unwrap();
    let mut restored = KvCache::load(dir.path()).unwrap();
    for _ in 0..40 {
        let row = random_matrix(&mut rng, 1, d_model, 1.0);
        let a = decode_step(&mm, &mut live, &row, &cfg).unwrap();
        let b = decode_step(&mm, &mut restored, &row, &cfg).unwrap();
        assert_eq!(a.attn_out, b.attn_out);
    }
    assert_eq!(
        live.materialize_k().unwrap(),
        restored.materialize_k().unwrap()
    );
    assert_eq!(live.memory(), restored.memory());
}

#[test]
fn simulation_is_reproducible_and_ordered_against_full_precision() {
    let cfg = SimConfig {
        seq_len: 128,
        decode_steps: 16,
        seed: 2,
        ..SimConfig::default()
    };
    let a = simulate::compare_methods(&cfg, &[Method::Fp, Method::Kivi, Method::Oscar]).unwrap();
    let b = simulate::compare_methods(&cfg, &[Method::Fp, Method::Kivi, Method::Oscar]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].output_mse, 0.0);
    assert!(a[1].output_mse > 0.0 && a[2].output_mse > 0.0);
    assert!(a[2].logit_mse < a[1].logit_mse);
    assert!(a[1].memory.total_bits() < a[0].memory.total_bits());
}
