//! Batched `exp` for the quadrature kernels.
//!
//! Cody-Waite reduction to `|r| ≤ ln2/2` and a degree-12 Taylor polynomial,
//! written branch-free so the compiler vectorizes it. Results are within a
//! couple of ulps of the libm value. The AVX2 build of the loop and the
//! portable build run the same operation sequence (no contraction into FMA),
//! so both produce identical bits.

const CHUNK: usize = 64;

#[inline(always)]
fn exp_poly(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    // 1.5 · 2^52: adding it rounds to an integer held in the low mantissa bits
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = if x < -708.0 { -708.0 } else { x };
    let x = if x > 709.0 { 709.0 } else { x };
    let y = x * LOG2E + SHIFT;
    let n = y - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // degree-12 Taylor polynomial, Estrin evaluation
    const C: [f64; 13] = [
        1.0,
        1.0,
        1.0 / 2.0,
        1.0 / 6.0,
        1.0 / 24.0,
        1.0 / 120.0,
        1.0 / 720.0,
        1.0 / 5_040.0,
        1.0 / 40_320.0,
        1.0 / 362_880.0,
        1.0 / 3_628_800.0,
        1.0 / 39_916_800.0,
        1.0 / 479_001_600.0,
    ];
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = (C[0] + C[1] * r) + (C[2] + C[3] * r) * r2;
    let q1 = (C[4] + C[5] * r) + (C[6] + C[7] * r) * r2;
    let q2 = (C[8] + C[9] * r) + (C[10] + C[11] * r) * r2;
    let p = (q0 + q1 * r4) + (q2 + C[12] * r4) * r8;
    let k = y.to_bits().wrapping_sub(SHIFT.to_bits());
    p * f64::from_bits(k.wrapping_add(1023) << 52)
}

#[inline(always)]
fn sum_portable(a: &[f64], d: &[f64], c: f64) -> f64 {
    let n = a.len().min(d.len());
    let mut lanes = [0.0f64; 4];
    let mut buf = [0.0f64; CHUNK];
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        let (a, d) = (&a[start..start + len], &d[start..start + len]);
        for ((o, x), y) in buf.iter_mut().zip(a).zip(d) {
            *o = x * exp_poly(-c * y);
        }
        let chunks = buf[..len].chunks_exact(4);
        let rest = chunks.remainder();
        for c in chunks {
            for l in 0..4 {
                lanes[l] += c[l];
            }
        }
        for (l, v) in rest.iter().enumerate() {
            lanes[l] += v;
        }
        start += len;
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3])
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sum_avx2(a: &[f64], d: &[f64], c: f64) -> f64 {
    sum_portable(a, d, c)
}

#[inline(always)]
fn map_portable(xs: &mut [f64]) {
    for x in xs {
        *x = exp_poly(*x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn map_avx2(xs: &mut [f64]) {
    map_portable(xs)
}

pub(crate) fn exp_in_place(xs: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { map_avx2(xs) };
        }
    }
    map_portable(xs)
}

pub(crate) fn weighted_exp_sum(a: &[f64], d: &[f64], c: f64) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { sum_avx2(a, d, c) };
        }
    }
    sum_portable(a, d, c)
}
