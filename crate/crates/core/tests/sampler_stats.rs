use omniguide::sampler::{sample_token, SamplerConfig};
use omniguide::LogitVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const DRAWS: usize = 10_000;

/// Expected distribution after penalty, temperature and top-p, computed
/// directly from the definitions.
fn expected(z: &[f64], history: &[usize], cfg: &SamplerConfig) -> Vec<f64> {
    let mut z = z.to_vec();
    let mut done = vec![false; z.len()];
    for &h in history {
        if !done[h] {
            done[h] = true;
            z[h] = if z[h] > 0.0 { z[h] / cfg.repetition_penalty } else { z[h] * cfg.repetition_penalty };
        }
    }
    let w: Vec<f64> = z.iter().map(|v| (v / cfg.temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|v| v / total).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let mut keep = vec![0.0; p.len()];
    let mut cum = 0.0;
    for i in order {
        keep[i] = p[i];
        cum += p[i];
        if cum >= cfg.top_p {
            break;
        }
    }
    let kept: f64 = keep.iter().sum();
    keep.iter().map(|v| v / kept).collect()
}

fn chi_square_p(z: &[f64], history: &[usize], cfg: &SamplerConfig, seed: u64) -> f64 {
    let lv = LogitVector::new(z.to_vec()).unwrap();
    let hist: Vec<u32> = history.iter().map(|&h| h as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; z.len()];
    for _ in 0..DRAWS {
        counts[sample_token(&lv, cfg, &hist, &mut rng) as usize] += 1;
    }
    let p = expected(z, history, cfg);
    let mut stat = 0.0;
    let mut cells = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi == 0.0 {
            assert_eq!(counts[i], 0, "token {i} outside the nucleus was drawn");
            continue;
        }
        let e = pi * DRAWS as f64;
        stat += (counts[i] as f64 - e).powi(2) / e;
        cells += 1;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn draws_follow_the_processed_distribution() {
    let z = [1.2, 0.4, -0.3, 2.0, 0.0, -1.5, 0.9, 0.1];
    let cases = [
        (SamplerConfig::default(), vec![3, 0, 3]),
        (SamplerConfig { temperature: 1.0, top_p: 1.0, repetition_penalty: 1.0, ..Default::default() }, vec![]),
        (SamplerConfig { temperature: 1.7, top_p: 0.8, repetition_penalty: 1.3, ..Default::default() }, vec![5, 1]),
    ];
    for (i, (cfg, history)) in cases.iter().enumerate() {
        let p = chi_square_p(&z, history, cfg, 1000 + i as u64);
        assert!(p > 0.001, "case {i}: chi-square p = {p}");
    }
}

#[test]
fn greedy_ignores_temperature_and_seed() {
    let z = LogitVector::new(vec![0.1, 0.7, 0.69]).unwrap();
    for seed in 0..10 {
        for temperature in [0.1, 0.6, 2.5] {
            let cfg = SamplerConfig { temperature, seed, ..SamplerConfig::greedy() };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_token(&z, &cfg, &[], &mut rng), 1);
        }
    }
}
