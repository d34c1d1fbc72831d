//! Acceptance criteria for the `oscar-kv` crate, each returning a verdict
//! with a one-line summary. The `acceptance` test target runs them all.

use std::time::Duration;

use oscar_kv::analysis::{self, Condition, Scheme, StudySpec};
use oscar_kv::costmodel::{self, CostConfig, CostMethod};
use oscar_kv::datagen::{self, TniSpec};
use oscar_kv::hadamard::{fht, hadamard_matrix, HadamardSize};
use oscar_kv::pipeline::{decode_step, model_for, prefill, reference_attention, ModelStub};
use oscar_kv::quant::{self, pack_codes, unpack_codes, BitWidth, PackedWords};
use oscar_kv::simulate::{self, SimConfig};
use oscar_kv::tensor::{dot, l2_norm, matmul, Matrix};
use oscar_kv::{KvCache, Method, PipelineConfig, SeededRng};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn bits(b: u8) -> BitWidth {
    BitWidth::new(b).unwrap()
}

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

fn rows(m: &Matrix, range: std::ops::Range<usize>) -> Matrix {
    Matrix::from_fn(range.len(), m.cols(), |i, j| m.get(range.start + i, j))
}

pub fn cost_table() -> Verdict {
    let cfg = CostConfig {
        d: 4096,
        h: 128,
        l: 10_000,
        lookup_weight: 5.0,
    };
    let expected = [
        (CostMethod::Kivi, 204.8, 81.9),
        (CostMethod::Quarot, 778.2, 82.0),
        (CostMethod::Oscar, 901.1, 123.0),
        (CostMethod::Turboquant, 32_051.0, 249.0),
        (CostMethod::TurboquantPlus, 21_187.0, 247.9),
    ];
    let breakdowns: Vec<_> = expected
        .iter()
        .map(|&(m, _, _)| costmodel::method_cost(m, &cfg).unwrap())
        .collect();
    let csv = costmodel::cost_csv(&breakdowns);
    let mut misses = Vec::new();
    let mut cells = 0;
    for (line, &(m, pre, dec)) in csv.lines().skip(1).zip(&expected) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], m.name());
        let b = breakdowns.iter().find(|b| b.method == m).unwrap();
        for (what, got, want) in [
            ("prefill", b.effective_prefill / 1e6, pre),
            ("decode", b.effective_decode / 1e6, dec),
        ] {
            cells += 1;
            if (got - want).abs() > 0.1 + 1e-9 {
                misses.push(format!("{} {what} {got:.3} vs {want}", m.name()));
            }
        }
    }
    let ok = cells - misses.len();
    let mut detail = format!("{ok}/{cells} cells within 0.1M");
    if !misses.is_empty() {
        detail.push_str(&format!("; off: {}", misses.join(", ")));
    }
    verdict(misses.is_empty(), detail)
}

pub fn artifact_demo() -> Verdict {
    let d = analysis::artifact_demo();
    let a_expect = [0.01, 0.01, 0.01, 1.00];
    let alpha_ok = d.alpha == 5.0;
    let beta_ok = (d.beta - 0.01).abs() <= 1e-4;
    let a_ok = d
        .a_scaled
        .iter()
        .zip(a_expect)
        .all(|(x, e)| (x - e).abs() <= 1e-3);
    let b_ok = d.b_scaled.iter().all(|&x| x == 0.5);
    let infl_ok = d.bits == 2 && d.step_inflation[..3].iter().all(|&r| r >= 50.0);
    let rendered = d.render();
    let report_ok = rendered.contains("artifact") && !rendered.contains("no artifact");
    verdict(
        alpha_ok && beta_ok && a_ok && b_ok && infl_ok && report_ok,
        format!(
            "alpha {} beta {:.6} a' {:?} b' {:?} inflation {:.2}",
            d.alpha,
            d.beta,
            d.a_scaled
                .iter()
                .map(|x| (x * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            d.b_scaled,
            d.step_inflation[0]
        ),
    )
}

pub fn transparency() -> Verdict {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for d in [32, 64, 128] {
        for s in [64, 300] {
            for seed in 0..10 {
                let mut rng = SeededRng::new(1000 * d as u64 + 10 * s as u64 + seed);
                let heads = 2;
                let d_model = 64;
                let m = random_model(&mut rng, d_model, heads, d);
                let hidden = random_matrix(&mut rng, s, d_model, 1.0);
                let cfg = PipelineConfig::new(Method::Oscar, heads, d).without_quantization();
                let mm = model_for(&m, &cfg).unwrap();
                let reference = reference_attention(&m, &hidden).unwrap();
                let prompt = s - 8;
                let (mut cache, out) = prefill(&mm, &rows(&hidden, 0..prompt), &cfg).unwrap();
                let mut err = rel_err(&out.attn_out, &rows(&reference, 0..prompt));
                for t in prompt..s {
                    let o = decode_step(&mm, &mut cache, &rows(&hidden, t..t + 1), &cfg).unwrap();
                    err = err.max(rel_err(&o.attn_out, &rows(&reference, t..t + 1)));
                }
                worst = worst.max(err);
                runs += 1;
            }
        }
    }
    verdict(
        worst <= 1e-9,
        format!("{runs} runs, worst relative error {worst:.2e}"),
    )
}

fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |s, x| s.max(x.abs()));
    a.max_abs_diff(b) / scale.max(f64::MIN_POSITIVE)
}

pub fn flush_consistency() -> Verdict {
    let mut worst = 0.0f64;
    let mut shapes_ok = true;
    for (s, r) in [(300, 128), (256, 128), (130, 64)] {
        for method in [Method::Oscar, Method::Kivi] {
            let mut rng = SeededRng::new((s * 7 + r) as u64);
            let (heads, d, d_model) = (2, 64, 48);
            let m = random_model(&mut rng, d_model, heads, d);
            let hidden = random_matrix(&mut rng, s, d_model, 1.0);
            let cfg = PipelineConfig::new(method, heads, d).with_group(32, r);
            let mm = model_for(&m, &cfg).unwrap();
            let (batched, _) = prefill(&mm, &hidden, &cfg).unwrap();
            let mut stepped = KvCache::new(cfg).unwrap();
            for t in 0..s {
                decode_step(&mm, &mut stepped, &rows(&hidden, t..t + 1), &cfg).unwrap();
            }
            shapes_ok &= batched.packed_tokens() == stepped.packed_tokens()
                && batched.residual_tokens() == stepped.residual_tokens()
                && batched.packed_tokens() == s - s % r;
            let kb = batched.materialize_k().unwrap();
            let ks = stepped.materialize_k().unwrap();
            let vb = batched.materialize_v().unwrap();
            let vs = stepped.materialize_v().unwrap();
            worst = worst.max(kb.max_abs_diff(&ks)).max(vb.max_abs_diff(&vs));
        }
    }
    verdict(
        shapes_ok && worst <= 1e-12,
        format!("packed/residual splits agree: {shapes_ok}, worst element difference {worst:.2e}"),
    )
}

pub fn quantizer_bounds() -> Verdict {
    let mut rng = SeededRng::new(5);
    let mut worst_ratio = 0.0f64;
    for b in [2u8, 3, 4, 8] {
        let lo = rng.uniform_range(-10.0, 0.0);
        let hi = lo + rng.uniform_range(0.1, 20.0);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.uniform_range(lo, hi)).collect();
        let p = quant::quant_params(&xs, bits(b)).unwrap();
        let back = quant::dequantize(&quant::quantize(&xs, &p), &p);
        for (x, y) in xs.iter().zip(&back) {
            // Ratio to the half step, with rounding slack at the scale of the data.
            let err = (x - y).abs() - 1e-12 * (1.0 + x.abs());
            worst_ratio = worst_ratio.max(err / (p.delta / 2.0));
        }
    }
    let round_trip_ok = worst_ratio <= 1.0;

    let xs: Vec<f64> = (0..1_000_000)
        .map(|_| rng.uniform_range(-1.0, 1.0))
        .collect();
    let p = quant::quant_params(&xs, bits(8)).unwrap();
    let back = quant::dequantize(&quant::quantize(&xs, &p), &p);
    let mse = xs
        .iter()
        .zip(&back)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / xs.len() as f64;
    let model = p.delta * p.delta / 12.0;
    let mse_ok = (mse / model - 1.0).abs() <= 0.05;

    let mut pack_ok = true;
    for i in 0..10_000 {
        let b = [2u8, 3, 4, 8][i % 4];
        let n = 1 + rng.below(200);
        let codes: Vec<u16> = (0..n).map(|_| rng.below(1 << b) as u16).collect();
        let packed = pack_codes(&codes, bits(b)).unwrap();
        pack_ok &= unpack_codes(&packed).unwrap() == codes;
        if b == 2 && n.is_multiple_of(8) {
            let words: Vec<u16> = (0..n / 8).map(|_| rng.next_u64() as u16).collect();
            let w = PackedWords {
                words: words.clone(),
                bits: 2,
                count: n,
            };
            pack_ok &= pack_codes(&unpack_codes(&w).unwrap(), bits(2))
                .unwrap()
                .words
                == words;
        }
    }
    verdict(
        round_trip_ok && mse_ok && pack_ok,
        format!(
            "worst |err|/(delta/2) {worst_ratio:.4}, 8-bit mse/model {:.4}, pack bijection {pack_ok}",
            mse / model
        ),
    )
}

pub fn tni_amplification() -> Verdict {
    let (mut k_pass, mut v_pass) = (0, 0);
    for seed in 0..20 {
        let ks = TniSpec {
            seed,
            ..TniSpec::key_pattern(256, 4, 128, seed)
        };
        let vs = TniSpec::value_pattern(256, 4, 128, seed);
        let (k, ann) = datagen::generate(&ks).unwrap();
        let (v, _) = datagen::generate(&vs).unwrap();
        let spec = StudySpec {
            bits: vec![bits(2)],
            group_size: 32,
            outlier_tokens: ann.outlier_tokens,
            modality_blocks: ann.modality_blocks,
        };
        let r = analysis::error_study(&k, &v, &spec).unwrap();
        let ratio = |s| {
            r.get(2, s, Condition::WithOutliers, "all").unwrap()
                / r.get(2, s, Condition::WithoutOutliers, "all").unwrap()
        };
        if ratio(Scheme::PerChannelK) > 1.2 {
            k_pass += 1;
        }
        if (0.5..=1.5).contains(&ratio(Scheme::PerTokenV)) {
            v_pass += 1;
        }
    }
    verdict(
        k_pass >= 18 && v_pass >= 18,
        format!("K ratio > 1.2 in {k_pass}/20 seeds, V ratio in [0.5, 1.5] in {v_pass}/20 seeds"),
    )
}

pub fn method_ordering() -> Verdict {
    let methods = [
        Method::Kivi,
        Method::RotateOnly,
        Method::ScaleOnly,
        Method::Oscar,
    ];
    let (mut all, mut o_r, mut r_k, mut s_k) = (0, 0, 0, 0);
    let mut logit_counts = [0; 3];
    for seed in 0..20 {
        let cfg = SimConfig {
            seed,
            bits: bits(2),
            ..SimConfig::default()
        };
        let reports = simulate::compare_methods(&cfg, &methods).unwrap();
        let out: Vec<f64> = reports.iter().map(|r| r.output_mse).collect();
        let logit: Vec<f64> = reports.iter().map(|r| r.logit_mse).collect();
        let (a, b, c) = (out[3] < out[1], out[1] < out[0], out[2] > out[0]);
        o_r += a as usize;
        r_k += b as usize;
        s_k += c as usize;
        all += (a && b && c) as usize;
        logit_counts[0] += (logit[3] < logit[1]) as usize;
        logit_counts[1] += (logit[1] < logit[0]) as usize;
        logit_counts[2] += (logit[2] > logit[0]) as usize;
    }
    verdict(
        all >= 18,
        format!(
            "full ordering in {all}/20 seeds (oscar<rotate {o_r}, rotate<kivi {r_k}, scale>kivi {s_k}); \
             logit MSE: {}/{}/{}",
            logit_counts[0], logit_counts[1], logit_counts[2]
        ),
    )
}

pub fn mse_bound() -> Verdict {
    let mut rng = SeededRng::new(8);
    let mut two_ok = true;
    let mut min_margin = f64::INFINITY;
    for _ in 0..1000 {
        let d = 32;
        let n1 = (rng.uniform_range(-3.0, 3.0)).exp();
        let n2 = (rng.uniform_range(-3.0, 3.0)).exp();
        let unit = |rng: &mut SeededRng| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = l2_norm(&v);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let a: Vec<f64> = unit(&mut rng).into_iter().map(|x| x * n1).collect();
        let b: Vec<f64> = unit(&mut rng).into_iter().map(|x| x * n2).collect();
        let block = vec![a, b];
        for bw in [2u8, 3, 4] {
            let bound = analysis::mse_lower_bound(&block, bits(bw)).unwrap();
            let measured = analysis::block_model_mse(&block, bits(bw)).unwrap();
            two_ok &= measured >= bound;
            min_margin = min_margin.min(measured / bound);
        }
    }
    let mut block_ok = true;
    let mut min_block = f64::INFINITY;
    for _ in 0..200 {
        let d = 32;
        let block: Vec<Vec<f64>> = (0..32)
            .map(|_| {
                let s = rng.uniform_range(-2.0, 2.0).exp();
                (0..d).map(|_| rng.normal() * s).collect()
            })
            .collect();
        for bw in [2u8, 3, 4] {
            let bound = analysis::mse_lower_bound(&block, bits(bw)).unwrap();
            let realized = analysis::block_rtn_mse(&block, bits(bw)).unwrap();
            block_ok &= realized >= bound / 2.0;
            min_block = min_block.min(realized / bound);
        }
    }
    verdict(
        two_ok && block_ok,
        format!("two-token min measured/bound {min_margin:.3}, size-32 min realized/bound {min_block:.3}"),
    )
}

pub fn hadamard_properties() -> Verdict {
    let mut rng = SeededRng::new(9);
    let mut worst = 0.0f64;
    for p in 0..=8 {
        let d = 1usize << p;
        let h = hadamard_matrix(HadamardSize::new(d).unwrap());
        let hht = matmul(&h, &h.transpose()).unwrap();
        worst = worst.max(hht.max_abs_diff(&Matrix::identity(d)));
        for _ in 0..20 {
            let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let hx = fht(&x).unwrap();
            let hy = fht(&y).unwrap();
            let back = fht(&hx).unwrap();
            let inv = back
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let norm = (l2_norm(&hx) - l2_norm(&x)).abs() / l2_norm(&x);
            let ip = (dot(&hx, &hy) - dot(&x, &y)).abs() / (l2_norm(&x) * l2_norm(&y));
            let dense: Vec<f64> = (0..d).map(|i| dot(h.row(i), &x)).collect();
            let agree = dense
                .iter()
                .zip(&hx)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(inv).max(norm).max(ip).max(agree);
        }
    }
    verdict(
        worst <= 1e-10,
        format!("d = 1..256, worst deviation {worst:.2e}"),
    )
}

/// Name, runtime budget and check.
pub type Criterion = (&'static str, Duration, fn() -> Verdict);

/// Every criterion, in order.
pub fn criteria() -> [Criterion; 9] {
    [
        ("cost table", Duration::from_secs(1), cost_table),
        ("artifact demo", Duration::from_secs(1), artifact_demo),
        (
            "rotation/scaling transparency",
            Duration::from_secs(30),
            transparency,
        ),
        (
            "flush consistency",
            Duration::from_secs(30),
            flush_consistency,
        ),
        (
            "quantizer bounds",
            Duration::from_secs(60),
            quantizer_bounds,
        ),
        (
            "TNI error amplification",
            Duration::from_secs(120),
            tni_amplification,
        ),
        ("method ordering", Duration::from_secs(180), method_ordering),
        ("MSE lower bound", Duration::from_secs(30), mse_bound),
        (
            "Hadamard properties",
            Duration::from_secs(10),
            hadamard_properties,
        ),
    ]
}
