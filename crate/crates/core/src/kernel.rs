//! Vectorisable Gaussian-kernel sums for Monte Carlo guidance in low dimension.
//!
//! The inner loop evaluates one exponential per pool atom, which dominates the
//! cost of Monte Carlo guidance. `f64::exp` is an opaque libm call, so the loop
//! uses a polynomial exponential that the compiler can vectorise. The same
//! arithmetic runs with or without AVX2, so results are bit-identical on any
//! x86-64 machine.

/// `exp(x)` for `x <= 0`, flushed to exactly zero below [`CUTOFF`].
///
/// Flushing keeps every product formed from kernel terms and likelihood
/// weights (see [`LIK_FLOOR`]) normal; subnormal operands are two orders of
/// magnitude slower. Range reduction `x = k ln2 + r`, `|r| <= ln2/2`, then a degree-12 Taylor
/// polynomial; relative error below 1e-15.
pub(crate) const CUTOFF: f64 = -350.0;

/// Likelihood weights below this are treated as zero.
pub(crate) const LIK_FLOOR: f64 = 1e-150;

#[inline(always)]
pub(crate) fn exp_neg(x: f64) -> f64 {
    const LOG2E: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits.
    const SHIFTER: f64 = 6_755_399_441_055_744.0;
    // All-ones when x is in range; zeroing the scale flushes the result
    // without a branch, which would block vectorisation.
    let keep = ((x >= CUTOFF) as u64).wrapping_neg();
    let x = x.max(CUTOFF);
    let kf = x * LOG2E + SHIFTER;
    let k_bits = kf.to_bits();
    let k = kf - SHIFTER;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    // The low bits of `k_bits` hold k in two's complement; rebuild 2^k.
    let scale = f64::from_bits((k_bits.wrapping_add(1023) << 52) & keep);
    p * scale
}

/// Weighted sums of the kernel `exp(-(z - alpha w_i)^2 c - shift)` over the pool:
/// `(sum k, sum k L, sum k w, sum k L w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct KernelSums {
    pub den: f64,
    pub num: f64,
    pub den_w: f64,
    pub num_w: f64,
}

const LANES: usize = 8;

#[inline(always)]
fn sums_body(pool: &[f64], lik: &[f64], z: f64, alpha: f64, c: f64, shift: f64) -> KernelSums {
    // Fixed lane-wise partial sums keep the reduction order independent of the
    // instruction set.
    let mut den = [0.0; LANES];
    let mut num = [0.0; LANES];
    let mut dw = [0.0; LANES];
    let mut nw = [0.0; LANES];
    let chunks = pool.len() / LANES;
    for j in 0..chunks {
        let w = &pool[j * LANES..(j + 1) * LANES];
        let l = &lik[j * LANES..(j + 1) * LANES];
        for i in 0..LANES {
            let e = z - alpha * w[i];
            let k = exp_neg(-e * e * c - shift);
            let kl = k * l[i];
            den[i] += k;
            num[i] += kl;
            dw[i] += k * w[i];
            nw[i] += kl * w[i];
        }
    }
    for idx in chunks * LANES..pool.len() {
        let i = idx % LANES;
        let e = z - alpha * pool[idx];
        let k = exp_neg(-e * e * c - shift);
        let kl = k * lik[idx];
        den[i] += k;
        num[i] += kl;
        dw[i] += k * pool[idx];
        nw[i] += kl * pool[idx];
    }
    let total = |a: [f64; LANES]| a.iter().sum::<f64>();
    KernelSums {
        den: total(den),
        num: total(num),
        den_w: total(dw),
        num_w: total(nw),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sums_avx2(pool: &[f64], lik: &[f64], z: f64, alpha: f64, c: f64, shift: f64) -> KernelSums {
    sums_body(pool, lik, z, alpha, c, shift)
}

pub(crate) fn kernel_sums(pool: &[f64], lik: &[f64], z: f64, alpha: f64, c: f64, shift: f64) -> KernelSums {
    debug_assert_eq!(pool.len(), lik.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked at runtime just above.
            return unsafe { sums_avx2(pool, lik, z, alpha, c, shift) };
        }
    }
    sums_body(pool, lik, z, alpha, c, shift)
}

/// `(sum k_i L_i, sum k_i L_i w_i)` with `log k_i L_i = -(z - alpha w_i)^2 c + log_lik_i`,
/// shifted by its own maximum, which is returned alongside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LogSums {
    pub max: f64,
    pub num: f64,
    pub num_w: f64,
}

#[inline(always)]
fn log_sums_body(pool: &[f64], log_lik: &[f64], z: f64, alpha: f64, c: f64) -> LogSums {
    let log_term = |w: f64, l: f64| {
        let e = z - alpha * w;
        -e * e * c + l
    };
    let mut mx = [f64::NEG_INFINITY; LANES];
    for (idx, (&w, &l)) in pool.iter().zip(log_lik).enumerate() {
        let v = log_term(w, l);
        let i = idx % LANES;
        mx[i] = if v > mx[i] { v } else { mx[i] };
    }
    let max = mx.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });
    let mut num = [0.0; LANES];
    let mut nw = [0.0; LANES];
    for (idx, (&w, &l)) in pool.iter().zip(log_lik).enumerate() {
        let k = exp_neg(log_term(w, l) - max);
        let i = idx % LANES;
        num[i] += k;
        nw[i] += k * w;
    }
    LogSums {
        max,
        num: num.iter().sum(),
        num_w: nw.iter().sum(),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn log_sums_avx2(pool: &[f64], log_lik: &[f64], z: f64, alpha: f64, c: f64) -> LogSums {
    log_sums_body(pool, log_lik, z, alpha, c)
}

pub(crate) fn log_sums(pool: &[f64], log_lik: &[f64], z: f64, alpha: f64, c: f64) -> LogSums {
    debug_assert_eq!(pool.len(), log_lik.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked at runtime just above.
            return unsafe { log_sums_avx2(pool, log_lik, z, alpha, c) };
        }
    }
    log_sums_body(pool, log_lik, z, alpha, c)
}

/// Kernel sums in `D` dimensions, shifted by the largest log kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct NdSums<const D: usize> {
    pub den: f64,
    pub num: f64,
    pub den_w: [f64; D],
    pub num_w: [f64; D],
}

/// `cols` holds the pool column-major: component `k` of atom `i` is `cols[k * m + i]`.
#[inline(always)]
fn nd_body<const D: usize>(cols: &[f64], lik: &[f64], z: &[f64; D], alpha: f64, c: f64) -> NdSums<D> {
    let m = lik.len();
    let col: [&[f64]; D] = std::array::from_fn(|k| &cols[k * m..(k + 1) * m]);
    let log_k = |idx: usize| {
        let mut s = 0.0;
        for k in 0..D {
            let e = z[k] - alpha * col[k][idx];
            s += e * e;
        }
        -s * c
    };
    // Same arithmetic as `log_k`, over one lane block with bounds checks hoisted.
    let log_k_block = |j: usize| {
        let mut s = [0.0; LANES];
        for k in 0..D {
            let w: &[f64; LANES] = col[k][j * LANES..(j + 1) * LANES].try_into().unwrap();
            for i in 0..LANES {
                let e = z[k] - alpha * w[i];
                s[i] += e * e;
            }
        }
        s.map(|v| -v * c)
    };
    let chunks = m / LANES;
    let mut mx = [f64::NEG_INFINITY; LANES];
    for j in 0..chunks {
        let v = log_k_block(j);
        for i in 0..LANES {
            mx[i] = if v[i] > mx[i] { v[i] } else { mx[i] };
        }
    }
    for idx in chunks * LANES..m {
        let v = log_k(idx);
        let slot = &mut mx[idx % LANES];
        *slot = if v > *slot { v } else { *slot };
    }
    let shift = mx.iter().fold(f64::NEG_INFINITY, |a, &b| if b > a { b } else { a });

    let mut den = [0.0; LANES];
    let mut num = [0.0; LANES];
    let mut dw = [[0.0; LANES]; D];
    let mut nw = [[0.0; LANES]; D];
    for j in 0..chunks {
        let v = log_k_block(j);
        let l: &[f64; LANES] = lik[j * LANES..(j + 1) * LANES].try_into().unwrap();
        let mut k = [0.0; LANES];
        let mut kl = [0.0; LANES];
        for i in 0..LANES {
            k[i] = exp_neg(v[i] - shift);
            kl[i] = k[i] * l[i];
            den[i] += k[i];
            num[i] += kl[i];
        }
        for c in 0..D {
            let w: &[f64; LANES] = col[c][j * LANES..(j + 1) * LANES].try_into().unwrap();
            for i in 0..LANES {
                dw[c][i] += k[i] * w[i];
                nw[c][i] += kl[i] * w[i];
            }
        }
    }
    for idx in chunks * LANES..m {
        let i = idx % LANES;
        let k = exp_neg(log_k(idx) - shift);
        let kl = k * lik[idx];
        den[i] += k;
        num[i] += kl;
        for c in 0..D {
            dw[c][i] += k * col[c][idx];
            nw[c][i] += kl * col[c][idx];
        }
    }
    NdSums {
        den: den.iter().sum(),
        num: num.iter().sum(),
        den_w: std::array::from_fn(|c| dw[c].iter().sum()),
        num_w: std::array::from_fn(|c| nw[c].iter().sum()),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn nd_avx2<const D: usize>(cols: &[f64], lik: &[f64], z: &[f64; D], alpha: f64, c: f64) -> NdSums<D> {
    nd_body(cols, lik, z, alpha, c)
}

pub(crate) fn kernel_sums_nd<const D: usize>(cols: &[f64], lik: &[f64], z: &[f64; D], alpha: f64, c: f64) -> NdSums<D> {
    debug_assert_eq!(cols.len(), D * lik.len());
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked at runtime just above.
            return unsafe { nd_avx2(cols, lik, z, alpha, c) };
        }
    }
    nd_body(cols, lik, z, alpha, c)
}
