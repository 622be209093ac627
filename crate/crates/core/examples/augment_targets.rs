//! Timestep-dependent corruption of training targets.

use denoise_perception::augmentation::{augment_report, AugmentationSpec};
use denoise_perception::toytask::{Example, TaskConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> denoise_perception::Result<()> {
    let ex = Example::generate(&TaskConfig::default(), 5)?;
    let x0 = ex.target_image();
    let spec = AugmentationSpec::enabled();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("{:>5} {:>9} {:>7} {:>8} {:>6} {:>6} {:>9}", "t", "intensity", "color", "rot_deg", "scale", "erased", "mask IoU");
    for t in [1, 100, 250, 500, 750, 1000] {
        let r = augment_report(&x0, &ex.scene.image, &ex.mask, t, 1000, &spec, &mut rng)?;
        println!(
            "{t:>5} {:>9.3} {:>7.3} {:>8.2} {:>6.3} {:>6} {:>9.3}",
            r.intensity,
            r.color_magnitude,
            r.rotation_deg,
            r.scale,
            r.erased_pixels,
            r.final_mask.iou(&ex.mask)?
        );
    }
    let half = AugmentationSpec { intensity_multiplier: 0.5, ..spec };
    let r = augment_report(&x0, &ex.scene.image, &ex.mask, 1000, 1000, &half, &mut rng)?;
    println!("multiplier 0.5 at t=1000: intensity {:.2}, pixel change {:.3}", r.intensity, r.image.max_abs_diff(&x0));
    Ok(())
}
