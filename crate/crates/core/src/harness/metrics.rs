//! Image quality scores on images stored in [-1, 1], scored on [0, 1].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "metric",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// `10 log10(1 / MSE)`; identical images give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (0.5 * (x - y)).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub fn capped(db: f64) -> f64 {
    db.min(PSNR_CAP)
}

/// Inclusive-exclusive 2-D prefix sums, `(h + 1) x (w + 1)`.
fn prefix(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

/// Mean SSIM over all 8x8 windows (stride 1) and channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let &[c, h, w] = a.shape() else {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("expected [C, H, W], got {:?}", a.shape()),
        });
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape {
            op: "ssim",
            detail: format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let area = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let x: Vec<f64> = a.data()[ch * area..(ch + 1) * area].iter().map(|v| 0.5 * (v + 1.0)).collect();
        let y: Vec<f64> = b.data()[ch * area..(ch + 1) * area].iter().map(|v| 0.5 * (v + 1.0)).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let tables = [&x, &y, &xx, &yy, &xy].map(|p| prefix(p, h, w));
        let stride = w + 1;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (y1, x1) = (y0 + SSIM_WINDOW, x0 + SSIM_WINDOW);
                let sums = tables.each_ref().map(|t| {
                    t[y1 * stride + x1] - t[y0 * stride + x1] - t[y1 * stride + x0] + t[y0 * stride + x0]
                });
                let (mx, my) = (sums[0] / n, sums[1] / n);
                let vx = sums[2] / n - mx * mx;
                let vy = sums[3] / n - my * my;
                let cov = sums[4] / n - mx * my;
                total += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
