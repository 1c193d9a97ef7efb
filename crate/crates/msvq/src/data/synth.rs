//! Deterministic synthetic clips: a colored rectangle bouncing over a
//! vertical background gradient. A desk-scale stand-in for real footage.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::clip::VideoClip;
use crate::error::Result;
use crate::nn::Scalar;

/// Axis position with exact integer bouncing between 0 and `max`.
struct Bouncer {
    pos: i64,
    vel: i64,
    max: i64,
}

impl Bouncer {
    fn step(&mut self) {
        if self.max == 0 {
            return;
        }
        let mut next = self.pos + self.vel;
        if next < 0 {
            next = -next;
            self.vel = -self.vel;
        }
        if next > self.max {
            next = 2 * self.max - next;
            self.vel = -self.vel;
        }
        self.pos = next;
    }
}

/// Generates a `3 x frames x height x width` clip at 16 fps. Same seed,
/// same bytes; the rectangle displaces exactly one pixel per frame along
/// each axis that has room to move.
pub fn synth_clip<F: Scalar>(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<VideoClip<F>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let top: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.45));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.45));
    let rect_color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.55..0.95));

    let rect_h = (height / 3).clamp(1, height.saturating_sub(1).max(1));
    let rect_w = (width / 3).clamp(1, width.saturating_sub(1).max(1));
    let max_y = (height - rect_h) as i64;
    let max_x = (width - rect_w) as i64;
    let mut y = Bouncer {
        pos: if max_y > 0 { rng.gen_range(0..=max_y) } else { 0 },
        vel: if rng.gen_bool(0.5) { 1 } else { -1 },
        max: max_y,
    };
    let mut x = Bouncer {
        pos: if max_x > 0 { rng.gen_range(0..=max_x) } else { 0 },
        vel: if rng.gen_bool(0.5) { 1 } else { -1 },
        max: max_x,
    };

    let mut data = Array4::<F>::zeros((3, frames, height, width));
    for t in 0..frames {
        for c in 0..3 {
            for r in 0..height {
                let frac = if height > 1 { r as f64 / (height - 1) as f64 } else { 0.0 };
                let bg = F::from_f(top[c] + (bottom[c] - top[c]) * frac);
                for col in 0..width {
                    data[(c, t, r, col)] = bg;
                }
            }
            let fill = F::from_f(rect_color[c]);
            for r in y.pos as usize..y.pos as usize + rect_h {
                for col in x.pos as usize..x.pos as usize + rect_w {
                    data[(c, t, r, col)] = fill;
                }
            }
        }
        y.step();
        x.step();
    }
    VideoClip::new(data, crate::data::CLIP_FPS)
}
