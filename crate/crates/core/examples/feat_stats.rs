//! Temporary probe: feature statistics of a trained vs random encoder.
use flowe_core::network::{init_params, load_checkpoint, Arch};
use flowe_core::readout::extract_features;
use flowe_core::imageio::load_rgb;
use flowe_core::rngstream::{derive_rng, STREAM_MODEL_INIT};
use flowe_core::tensor::Tensor;

fn stats(name: &str, params: &flowe_core::network::ModelParams<f64>, frames: &[Tensor<f64>]) {
    let mut all: Vec<Vec<f64>> = Vec::new();
    for f in frames {
        let h = extract_features(params, f).unwrap();
        let (c, hh, ww) = h.dims3().unwrap();
        for y in 0..hh {
            for x in 0..ww {
                let v: Vec<f64> = (0..c).map(|ch| h.at3(ch, y, x)).collect();
                all.push(v);
            }
        }
    }
    let n = all.len() as f64;
    let c = all[0].len();
    let norms: Vec<f64> = all.iter().map(|v| v.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    let mean_norm = norms.iter().sum::<f64>() / n;
    let max_norm = norms.iter().cloned().fold(0.0, f64::max);
    // mean pairwise cosine over strided pairs
    let mut cos_sum = 0.0;
    let mut cnt = 0.0;
    let step = (all.len() / 500).max(1);
    let sel: Vec<&Vec<f64>> = all.iter().step_by(step).collect();
    for i in 0..sel.len() {
        for j in (i + 1)..sel.len().min(i + 6) {
            let a = sel[i]; let b = sel[j];
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na > 1e-9 && nb > 1e-9 {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                cos_sum += dot / (na * nb);
                cnt += 1.0;
            }
        }
    }
    // per-channel std across all locations
    let mut ch_std = vec![0.0; c];
    for ch in 0..c {
        let m: f64 = all.iter().map(|v| v[ch]).sum::<f64>() / n;
        let var: f64 = all.iter().map(|v| (v[ch] - m).powi(2)).sum::<f64>() / n;
        ch_std[ch] = var.sqrt();
    }
    ch_std.sort_by(f64::total_cmp);
    println!(
        "{name}: mean|h| {:.4e} max|h| {:.4e} mean-cos {:.4} ch-std median {:.3e} max {:.3e}",
        mean_norm, max_norm, cos_sum / cnt, ch_std[c / 2], ch_std[c - 1]
    );
}

fn main() {
    let arch = Arch::default_desk();
    let frames: Vec<Tensor<f64>> = (0..4)
        .map(|e| load_rgb(format!("/tmp/bench/dataset/ep00{e}/frame000.png")).unwrap())
        .collect();
    let bytes = std::fs::read("/tmp/bench/train/checkpoint-final.bin").unwrap();
    let ck = load_checkpoint::<f64>(&bytes, &arch).unwrap();
    stats("trained", &ck.online, &frames);
    let rand = init_params::<f64>(&arch, &mut derive_rng(0, &[STREAM_MODEL_INIT])).unwrap();
    stats("random ", &rand, &frames);
}
