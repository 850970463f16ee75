use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::data_model::{ImageStack, IMG_SIZE, SLICES};
use ndarray::Array3;

/// Random geometric augmentation for localizer training stacks: rotation
/// in ±8°, scale in [0.95, 1.05], translation in ±6 px, one transform per
/// subject shared across slices. The warped stack is re-normalized so the
/// intensity invariant survives augmentation.
pub fn augment_stack(stack: &ImageStack, rng: &mut ChaCha20Rng) -> ImageStack {
    let theta: f64 = rng.gen_range(-8.0f64..8.0).to_radians();
    let scale: f64 = rng.gen_range(0.95..1.05);
    let tx: f64 = rng.gen_range(-6.0..6.0);
    let ty: f64 = rng.gen_range(-6.0..6.0);
    warp_stack(stack, theta, scale, tx, ty)
}

/// Inverse-maps output pixels through rotation/scale about the image
/// center plus translation; bilinear sampling with border clamping.
pub fn warp_stack(stack: &ImageStack, theta: f64, scale: f64, tx: f64, ty: f64) -> ImageStack {
    let c = (IMG_SIZE as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    let inv_scale = 1.0 / scale;

    let mut voxels = Array3::<f32>::zeros((SLICES, IMG_SIZE, IMG_SIZE));
    for s in 0..SLICES {
        for y in 0..IMG_SIZE {
            for x in 0..IMG_SIZE {
                let dx = x as f64 - c - tx;
                let dy = y as f64 - c - ty;
                let sx = (cos * dx + sin * dy) * inv_scale + c;
                let sy = (-sin * dx + cos * dy) * inv_scale + c;
                voxels[[s, y, x]] = bilinear(stack, s, sx, sy);
            }
        }
    }
    ImageStack::normalize(voxels).expect("warped stack stays finite")
}

fn bilinear(stack: &ImageStack, slice: usize, x: f64, y: f64) -> f32 {
    let max = (IMG_SIZE - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(IMG_SIZE - 1);
    let y1 = (y0 + 1).min(IMG_SIZE - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = stack.voxels[[slice, y0, x0]] as f64;
    let v01 = stack.voxels[[slice, y0, x1]] as f64;
    let v10 = stack.voxels[[slice, y1, x0]] as f64;
    let v11 = stack.voxels[[slice, y1, x1]] as f64;
    ((v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy) as f32
}
