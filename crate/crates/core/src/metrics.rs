//! Volume similarity metrics: SSIM, PSNR and NRMSE.

use crate::error::{Error, Result};
use crate::ndcore::Tensor;
use crate::sequence::LongitudinalVolume;

/// PSNR reported when the volumes (nearly) coincide.
pub const PSNR_CAP: f64 = 100.0;
const WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Dynamic range of normalized data.
const RANGE: f64 = 1.0;

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.ndim() != 3 {
        return Err(Error::invalid(op, format!("expected a 3D volume, got {:?}", a.shape())));
    }
    Ok(())
}

/// Mean local SSIM over every position of a 7×7×7 uniform window lying
/// fully inside the volume (axes shorter than 7 use their full extent).
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let s = a.shape();
    let win: Vec<usize> = s.iter().map(|&e| e.min(WINDOW)).collect();
    let n = (win[0] * win[1] * win[2]) as f64;
    let c1 = (K1 * RANGE).powi(2);
    let c2 = (K2 * RANGE).powi(2);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for x0 in 0..=s[0] - win[0] {
        for y0 in 0..=s[1] - win[1] {
            for z0 in 0..=s[2] - win[2] {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for x in x0..x0 + win[0] {
                    for y in y0..y0 + win[1] {
                        let row = (x * s[1] + y) * s[2];
                        for z in z0..z0 + win[2] {
                            let (u, v) = (ad[row + z], bd[row + z]);
                            sa += u;
                            sb += v;
                            saa += u * u;
                            sbb += v * v;
                            sab += u * v;
                        }
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.numel() as f64
}

/// `10·log10(R²/MSE)` with `R = 1`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let m = mse(a, b);
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (RANGE * RANGE / m).log10()).min(PSNR_CAP))
}

/// RMSE divided by the value range of the ground truth `truth`.
pub fn nrmse(truth: &Tensor, pred: &Tensor) -> Result<f64> {
    check_pair("nrmse", truth, pred)?;
    let range = truth.max() - truth.min();
    if range <= 0.0 {
        return Err(Error::invalid("nrmse", "ground truth is constant (zero value range)"));
    }
    Ok(mse(truth, pred).sqrt() / range)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMetrics {
    /// 1-based frame index.
    pub frame: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub nrmse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_nrmse: f64,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("metrics", "no frames to evaluate"));
        }
        let n = frames.len() as f64;
        let mean = |f: fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            mean_ssim: mean(|m| m.ssim),
            mean_psnr: mean(|m| m.psnr),
            mean_nrmse: mean(|m| m.nrmse),
            frames,
        })
    }

    /// `frame,ssim,psnr,nrmse` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,ssim,psnr,nrmse\n");
        for m in &self.frames {
            s.push_str(&format!("{},{:.6},{:.4},{:.6}\n", m.frame, m.ssim, m.psnr, m.nrmse));
        }
        s.push_str(&format!("mean,{:.6},{:.4},{:.6}\n", self.mean_ssim, self.mean_psnr, self.mean_nrmse));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>10} {:>9}\n", "frame", "SSIM", "PSNR(dB)", "NRMSE");
        for m in &self.frames {
            s.push_str(&format!("{:>6} {:>9.4} {:>10.3} {:>9.4}\n", m.frame, m.ssim, m.psnr, m.nrmse));
        }
        s.push_str(&format!(
            "{:>6} {:>9.4} {:>10.3} {:>9.4}\n",
            "mean", self.mean_ssim, self.mean_psnr, self.mean_nrmse
        ));
        s
    }
}

/// Score every frame present in `pred` against the same frame of `truth`.
pub fn evaluate(pred: &LongitudinalVolume, truth: &LongitudinalVolume) -> Result<MetricReport> {
    if pred.len() != truth.len() || pred.extents() != truth.extents() {
        return Err(Error::invalid(
            "evaluate",
            format!(
                "prediction has {} frames of {:?}, truth has {} of {:?}",
                pred.len(),
                pred.extents(),
                truth.len(),
                truth.extents()
            ),
        ));
    }
    let mut frames = Vec::new();
    for i in 1..=pred.len() {
        if !pred.is_present(i) {
            continue;
        }
        if !truth.is_present(i) {
            return Err(Error::invalid("evaluate", format!("frame {i} is absent from the ground truth")));
        }
        let (p, t) = (pred.frame(i), truth.frame(i));
        frames.push(FrameMetrics {
            frame: i,
            ssim: ssim(t, p)?,
            psnr: psnr(t, p)?,
            nrmse: nrmse(t, p)?,
        });
    }
    MetricReport::from_frames(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Rng;

    fn checkerboard(s: [usize; 3]) -> Tensor {
        let mut t = Tensor::zeros(&s);
        for x in 0..s[0] {
            for y in 0..s[1] {
                for z in 0..s[2] {
                    t.data_mut()[(x * s[1] + y) * s[2] + z] = ((x + y + z) % 2) as f64;
                }
            }
        }
        t
    }

    #[test]
    fn identical_volumes() {
        let mut rng = Rng::new(0);
        let a = Tensor::rand_uniform(&[9, 8, 7], 0.0, 1.0, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn inverted_checkerboard_is_negative() {
        let a = checkerboard([8, 8, 8]);
        let b = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn independent_noise_near_zero() {
        let mut rng = Rng::new(1);
        for _ in 0..5 {
            let a = Tensor::rand_uniform(&[16, 16, 16], 0.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform(&[16, 16, 16], 0.0, 1.0, &mut rng);
            assert!(ssim(&a, &b).unwrap().abs() < 0.1);
        }
    }

    #[test]
    fn psnr_hand_value() {
        let a = Tensor::zeros(&[2, 2, 2]);
        let b = Tensor::full(&[2, 2, 2], 0.5);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-4);
    }

    #[test]
    fn nrmse_offset_and_constant_truth() {
        let mut a = Tensor::zeros(&[4, 4, 4]);
        a.data_mut()[0] = 1.0;
        let b = a.map(|v| v + 0.1);
        assert!((nrmse(&a, &b).unwrap() - 0.1).abs() < 1e-12);
        assert!(nrmse(&Tensor::ones(&[2, 2, 2]), &b.clone().reshape(&[4, 4, 4]).unwrap()).is_err());
        assert!(nrmse(&Tensor::ones(&[2, 2, 2]), &Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn symmetric_and_bounded() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let a = Tensor::rand_uniform(&[8, 8, 8], 0.0, 1.0, &mut rng);
            let b = a.map(|v| (v * 0.7 + 0.1).min(1.0));
            let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            assert!((ab - ba).abs() < 1e-12 && ab <= 1.0);
        }
    }

    #[test]
    fn psnr_and_nrmse_rank_agree() {
        let mut rng = Rng::new(3);
        let truth = Tensor::rand_uniform(&[6, 6, 6], 0.0, 1.0, &mut rng);
        let cands: Vec<Tensor> = (1..6)
            .map(|k| {
                let noise = Tensor::randn(&[6, 6, 6], &mut rng).scale(0.03 * k as f64);
                truth.add(&noise).unwrap()
            })
            .collect();
        for a in &cands {
            for b in &cands {
                let p = psnr(&truth, a).unwrap() > psnr(&truth, b).unwrap();
                let n = nrmse(&truth, a).unwrap() < nrmse(&truth, b).unwrap();
                assert_eq!(p, n);
            }
        }
    }

    #[test]
    fn report_csv() {
        let r = MetricReport::from_frames(vec![
            FrameMetrics { frame: 2, ssim: 1.0, psnr: 100.0, nrmse: 0.0 },
            FrameMetrics { frame: 3, ssim: 0.5, psnr: 20.0, nrmse: 0.2 },
        ])
        .unwrap();
        assert_eq!(r.mean_ssim, 0.75);
        assert!(r.to_csv().ends_with("mean,0.750000,60.0000,0.100000\n"));
    }
}
