//! White-reference calibration on a synthetic vignetted reference: mask
//! refinement sweep, then reflectance recovery of a known target.

use hyperfield::calibration::{calibrate, percentile_sweep, vignetted_reference, WrCalibration};
use hyperfield::hypercube::{linear_wavelengths, CubeKind, HyperCube, Mask};

fn main() -> hyperfield::Result<()> {
    let (h, w) = (64, 64);
    let wl = linear_wavelengths(400.0, 1000.0, 32);
    let illum: Vec<f64> = wl.iter().map(|nm| 0.35 + 0.6 * (-((nm - 720.0) / 260.0).powi(2)).exp()).collect();
    let wr = vignetted_reference(h, w, &wl, &illum, 0.2, 0.8)?;
    let c = (h as f64 - 1.0) / 2.0;
    let roi = Mask::from_fn(h, w, |y, x| ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() <= 0.45 * h as f64);

    let sweep = percentile_sweep(&wr, &roi, &[60.0, 65.0, 70.0, 75.0, 80.0])?;
    print!("{}", sweep.to_csv());
    println!("ROI: {} px, max deviation {:.4}", sweep.roi_row.pixel_count, sweep.roi_row.max_deviation);

    let reflectance = |y: usize, x: usize, b: usize| 0.2 + 0.6 * ((y + x) % 7) as f64 / 7.0 * (b as f64 / 31.0);
    let raw = HyperCube::from_fn(h, w, wl.clone(), CubeKind::Raw, |y, x, b| (reflectance(y, x, b) * illum[b]) as f32)?;
    for window in [1, 5] {
        let calib = WrCalibration::fit(&wr, &roi, 70.0, window)?;
        let out = calibrate(&raw, &calib)?;
        let mut worst: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                for b in 0..wl.len() {
                    worst = worst.max((out.get(y, x, b) as f64 - reflectance(y, x, b)).abs());
                }
            }
        }
        println!("window {window}: {} reference px, max reflectance error {worst:.2e}", calib.pixel_count);
    }
    Ok(())
}
