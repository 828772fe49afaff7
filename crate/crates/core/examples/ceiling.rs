//! Temporary probe: mIoU ceiling of the stride-8 readout protocol — perfect
//! per-cell majority labels, one-hot logits, bilinear upsample, argmax.
use flowe_core::geometry::upsample_bilinear;
use flowe_core::imageio::load_gray;
use flowe_core::readout::{ConfusionMatrix};
use flowe_core::synthvid::LabelMap;
use flowe_core::tensor::Tensor;

fn main() {
    let mut confusion = ConfusionMatrix::new(4);
    for e in 6..8 {
        for f in 0..8 {
            let path = format!("/tmp/bench/dataset/ep00{e}/labels{f:03}.png");
            let (h, w, data) = load_gray(&path).unwrap();
            let (gh, gw) = (h / 8, w / 8);
            let mut logits = Tensor::<f64>::zeros(&[4, gh, gw]);
            for gy in 0..gh {
                for gx in 0..gw {
                    let mut counts = [0usize; 4];
                    for dy in 0..8 {
                        for dx in 0..8 {
                            counts[data[(gy * 8 + dy) * w + gx * 8 + dx] as usize] += 1;
                        }
                    }
                    let best = (0..4).max_by_key(|&c| counts[c]).unwrap();
                    logits.set3(best, gy, gx, 1.0);
                }
            }
            let up = upsample_bilinear(&logits, h, w).unwrap();
            let mut pred = vec![0u8; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut bi = 0;
                    let mut bv = f64::NEG_INFINITY;
                    for c in 0..4 {
                        let v = up.at3(c, y, x);
                        if v > bv {
                            bv = v;
                            bi = c;
                        }
                    }
                    pred[y * w + x] = bi as u8;
                }
            }
            let pred = LabelMap::from_vec(h, w, pred).unwrap();
            let truth = LabelMap::from_vec(h, w, data).unwrap();
            confusion.accumulate(&pred, &truth).unwrap();
        }
    }
    let r = confusion.report();
    println!("oracle ceiling mIoU {:.4} per-class {:?}", r.miou, r.per_class_iou);
}
