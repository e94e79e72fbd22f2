//! Rasterizers for the face-attribute shapes. All tests are against pixel
//! centers, so a shape is a pure predicate over (x + 0.5, y + 0.5).

use crate::semantic_maps::Mask;

pub(crate) fn in_ellipse(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (px - cx) / rx;
    let dy = (py - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

pub(crate) fn rasterize(w: usize, h: usize, pred: impl Fn(f64, f64) -> bool) -> Mask {
    Mask::from_fn(w, h, |x, y| pred(x as f64 + 0.5, y as f64 + 0.5))
}

#[derive(Clone, Debug)]
pub(crate) struct FaceGeom {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

pub(crate) fn face_mask(w: usize, h: usize, g: &FaceGeom) -> Mask {
    rasterize(w, h, |px, py| in_ellipse(px, py, g.cx, g.cy, g.rx, g.ry))
}

#[derive(Clone, Debug)]
pub(crate) struct HairGeom {
    /// Outward margin beyond the face ellipse.
    pub margin: f64,
    /// Inner shrink of the face ellipse that hair never covers.
    pub shrink: f64,
    /// Hair reaches down to cy + len_frac * ry on the sides.
    pub len_frac: f64,
    /// Sinusoidal modulation of the outer boundary (0 = straight).
    pub wave_amp: f64,
    pub wave_freq: f64,
}

pub(crate) fn hair_mask(w: usize, h: usize, f: &FaceGeom, g: &HairGeom) -> Mask {
    let bottom = f.cy + g.len_frac * f.ry;
    let cap_y = f.cy - 0.5 * f.ry;
    rasterize(w, h, |px, py| {
        // horizontal ripples: the outer radius oscillates along y
        let phase = g.wave_freq * std::f64::consts::TAU * (py - f.cy) / f.ry;
        let wobble = g.wave_amp * phase.sin();
        let orx = f.rx + g.margin + wobble;
        let ory = f.ry + g.margin + g.wave_amp;
        if !in_ellipse(px, py, f.cx, f.cy, orx, ory) {
            return false;
        }
        // solid cap over the top of the head
        if py < cap_y {
            return true;
        }
        // side band down to the hair length
        py <= bottom && !in_ellipse(px, py, f.cx, f.cy, f.rx - g.shrink, f.ry - g.shrink)
    })
}

#[derive(Clone, Debug)]
pub(crate) struct EyesGeom {
    pub off_x: f64,
    pub ey: f64,
    pub rx: f64,
    pub ry: f64,
}

pub(crate) fn eyes_mask(w: usize, h: usize, f: &FaceGeom, g: &EyesGeom) -> Mask {
    rasterize(w, h, |px, py| {
        in_ellipse(px, py, f.cx - g.off_x, g.ey, g.rx, g.ry)
            || in_ellipse(px, py, f.cx + g.off_x, g.ey, g.rx, g.ry)
    })
}

#[derive(Clone, Debug)]
pub(crate) struct BlobGeom {
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

pub(crate) fn blob_mask(w: usize, h: usize, f: &FaceGeom, g: &BlobGeom) -> Mask {
    rasterize(w, h, |px, py| in_ellipse(px, py, f.cx, g.cy, g.rx, g.ry))
}

#[derive(Clone, Debug)]
pub(crate) struct GlassesGeom {
    /// Lens half-width = eye rx + pad.
    pub pad: f64,
    pub rim: f64,
    /// Lens ry / rx; near 1 reads as "round".
    pub ratio: f64,
}

/// Two lens rims plus a bridge bar; no arms, so the bounding box is the
/// lens block itself.
pub(crate) fn glasses_mask(w: usize, h: usize, f: &FaceGeom, e: &EyesGeom, g: &GlassesGeom) -> Mask {
    let lrx = e.rx + g.pad;
    let lry = lrx * g.ratio;
    let rim = g.rim.max(1.0);
    let (lx, rx_c) = (f.cx - e.off_x, f.cx + e.off_x);
    rasterize(w, h, |px, py| {
        for cx in [lx, rx_c] {
            let outer = in_ellipse(px, py, cx, e.ey, lrx + rim, lry + rim);
            let inner = in_ellipse(px, py, cx, e.ey, lrx - rim, lry - rim);
            if outer && !inner {
                return true;
            }
        }
        // bridge between the inner lens edges
        px >= lx + lrx - rim && px <= rx_c - lrx + rim && (py - e.ey).abs() <= 1.0
    })
}

#[derive(Clone, Debug)]
pub(crate) struct HatGeom {
    pub margin: f64,
    /// Hat covers the head region above cy − band_frac * ry.
    pub band_frac: f64,
    pub brim_h: f64,
    pub brim_w: f64,
}

pub(crate) fn hat_mask(w: usize, h: usize, f: &FaceGeom, g: &HatGeom) -> Mask {
    let band_y = f.cy - g.band_frac * f.ry;
    rasterize(w, h, |px, py| {
        let crown = in_ellipse(px, py, f.cx, f.cy, f.rx + g.margin, f.ry + g.margin) && py <= band_y;
        let brim = (py - band_y).abs() <= g.brim_h / 2.0
            && (px - f.cx).abs() <= f.rx + g.margin + g.brim_w;
        crown || brim
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FACE: FaceGeom = FaceGeom {
        cx: 32.0,
        cy: 35.0,
        rx: 17.0,
        ry: 22.0,
    };

    #[test]
    fn face_mask_is_centered_and_nonempty() {
        let m = face_mask(64, 64, &FACE);
        assert!(m.get(32, 35));
        assert!(!m.get(0, 0));
        assert!(m.count_ones() > 500);
    }

    #[test]
    fn glasses_ring_is_hollow() {
        let e = EyesGeom {
            off_x: 8.0,
            ey: 30.0,
            rx: 3.0,
            ry: 2.0,
        };
        let g = GlassesGeom {
            pad: 2.0,
            rim: 1.2,
            ratio: 1.0,
        };
        let m = glasses_mask(64, 64, &FACE, &e, &g);
        assert!(!m.is_empty());
        // lens centers are open
        assert!(!m.get(24, 30));
        assert!(!m.get(40, 30));
    }

    #[test]
    fn hat_sits_above_band() {
        let g = HatGeom {
            margin: 3.0,
            band_frac: 0.5,
            brim_h: 2.0,
            brim_w: 2.0,
        };
        let m = hat_mask(64, 64, &FACE, &g);
        assert!(!m.is_empty());
        let band_y = (FACE.cy - 0.5 * FACE.ry) as usize;
        for y in (band_y + 3)..64 {
            for x in 0..64 {
                assert!(!m.get(x, y), "hat pixel below band at ({x},{y})");
            }
        }
    }
}
