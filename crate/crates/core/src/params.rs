//! Flat views over trainable parameter sets.

use ndarray::{Array1, Array2, Array3};

/// A bundle of `f64` tensors visited in a fixed order.
///
/// The visiting order defines the layout of the flat vector and of every
/// on-disk format built from it.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |s| n += s.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }

    /// Overwrites every value from `flat`, which must hold exactly `num_params` values.
    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut at = 0;
        self.visit_mut(&mut |s| {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        });
    }

    fn fill(&mut self, v: f64) {
        self.visit_mut(&mut |s| s.fill(v));
    }

    /// `self += a · other`, both with identical layout.
    fn axpy(&mut self, a: f64, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.to_flat();
        let mut at = 0;
        self.visit_mut(&mut |s| {
            let n = s.len();
            for (x, y) in s.iter_mut().zip(&flat[at..at + n]) {
                *x += a * y;
            }
            at += n;
        });
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice3(a: &Array3<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice3_mut(a: &mut Array3<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// FNV-1a over the bit patterns of every value, for cheap equality checks.
pub fn param_hash<P: ParamSet + ?Sized>(p: &P) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    p.visit(&mut |s| {
        for v in s {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    });
    h
}

/// Reads little-endian `f32` values into `dst`, advancing `at`.
pub(crate) fn read_f32_into(bytes: &[u8], at: &mut usize, dst: &mut [f64]) -> Result<(), String> {
    let need = dst.len() * 4;
    if bytes.len() < *at + need {
        return Err("truncated weight block".into());
    }
    for (i, d) in dst.iter_mut().enumerate() {
        let o = *at + 4 * i;
        let v = f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err("non-finite weight".into());
        }
        *d = v as f64;
    }
    *at += need;
    Ok(())
}

pub(crate) fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32, String> {
    if bytes.len() < *at + 4 {
        return Err("truncated header".into());
    }
    let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap());
    *at += 4;
    Ok(v)
}
