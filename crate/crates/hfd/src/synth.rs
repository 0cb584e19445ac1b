//! Procedural test images: a smooth background, soft-edged shapes, some
//! with stripe or grain texture, and mild sensor-like noise. Used for the
//! committed demo assets and the toy training set.

use hfd_core::{ImageBuffer, SeededStream};

struct Shape {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    ellipse: bool,
    color: [f64; 3],
    stripes: Option<(f64, f64, f64)>,
    grain: f64,
}

fn smoothstep(e: f64) -> f64 {
    let t = e.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Deterministic RGB image of the given size.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let s = SeededStream::new(seed);
    let u = |k: u64| s.substream(0).uniform_at(k);
    let bg: Vec<[f64; 5]> = (0..3u64)
        .map(|c| {
            let b = 10 * c;
            [0.25 + 0.5 * u(b), 0.2 * (u(b + 1) - 0.5), 1.0 + 4.0 * u(b + 2), 1.0 + 4.0 * u(b + 3), 6.3 * u(b + 4)]
        })
        .collect();
    let n_shapes = 6 + (s.u64_at(1) % 8) as usize;
    let scale = height.min(width) as f64;
    let shapes: Vec<Shape> = (0..n_shapes as u64)
        .map(|i| {
            let r = s.substream(1).substream(i);
            let a = |k: u64| r.uniform_at(k);
            Shape {
                cy: a(0) * height as f64,
                cx: a(1) * width as f64,
                ry: scale * (0.05 + 0.25 * a(2)),
                rx: scale * (0.05 + 0.25 * a(3)),
                ellipse: a(4) < 0.5,
                color: [a(5), a(6), a(7)],
                stripes: (a(8) < 0.4).then(|| (0.15 + 0.6 * a(9), 3.14 * a(10), 0.1 + 0.2 * a(11))),
                grain: if a(12) < 0.4 { 0.05 + 0.1 * a(13) } else { 0.0 },
            }
        })
        .collect();
    let grain = s.substream(2);
    let noise = s.substream(3);
    let mut img = ImageBuffer::new(height, width, 3);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let b = bg[c];
                *p = b[0] + b[1] * ((b[2] * fy + b[4]).sin() + (b[3] * fx - b[4]).cos());
            }
            for (i, sh) in shapes.iter().enumerate() {
                let (dy, dx) = (y as f64 + 0.5 - sh.cy, x as f64 + 0.5 - sh.cx);
                // Signed distance in pixels, approximately.
                let d = if sh.ellipse {
                    ((dy / sh.ry).powi(2) + (dx / sh.rx).powi(2)).sqrt().mul_add(1.0, -1.0) * sh.ry.min(sh.rx)
                } else {
                    (dy.abs() - sh.ry).max(dx.abs() - sh.rx)
                };
                let cover = smoothstep(0.5 - d);
                if cover <= 0.0 {
                    continue;
                }
                let mut col = sh.color;
                if let Some((freq, angle, amp)) = sh.stripes {
                    let ph = freq * (dy * angle.sin() + dx * angle.cos());
                    let v = amp * ph.sin();
                    col.iter_mut().for_each(|c| *c += v);
                }
                if sh.grain > 0.0 {
                    let g = sh.grain * grain.substream(i as u64).normal_at((y * width + x) as u64);
                    col.iter_mut().for_each(|c| *c += g);
                }
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + col[c] * cover;
                }
            }
            for (c, p) in px.iter().enumerate() {
                let n = 0.01 * noise.normal_at(((y * width + x) * 3 + c) as u64);
                img.set(y, x, c, (p + n).clamp(0.0, 1.0));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_image(40, 56, 3);
        assert_eq!(a, synthetic_image(40, 56, 3));
        assert_ne!(a, synthetic_image(40, 56, 4));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
