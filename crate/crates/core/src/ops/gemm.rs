//! Packed row-major matrix multiply. All convolution and linear layers
//! funnel through [`gemm`].

use crate::real::Real;

const MR: usize = 4;
const NR: usize = 32;
const KC: usize = 256;
const MC: usize = 128;
const NC: usize = 2048;

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`, all row-major.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is stored `k×n`
/// (or `n×k` when `trans_b`). With `accumulate == false` the previous
/// contents of `c` are overwritten.
#[allow(clippy::too_many_arguments)]
pub fn gemm<R: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[R],
    b: &[R],
    c: &mut [R],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 || k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = R::ZERO);
        }
        return;
    }

    let mut packed_b = Vec::with_capacity(KC.min(k) * NC.min(n.div_ceil(NR) * NR));
    let mut packed_a = Vec::with_capacity(MC.min(m.div_ceil(MR) * MR) * KC.min(k));

    let mut jc = 0;
    while jc < n {
        let nc = NC.min(n - jc);
        let mut pc = 0;
        while pc < k {
            let kc = KC.min(k - pc);
            pack_b(trans_b, b, n, k, pc, kc, jc, nc, &mut packed_b);
            let mut ic = 0;
            while ic < m {
                let mc = MC.min(m - ic);
                pack_a(trans_a, a, m, k, ic, mc, pc, kc, &mut packed_a);
                for jr in (0..nc).step_by(NR) {
                    let nr = NR.min(nc - jr);
                    let bp = &packed_b[(jr / NR) * kc * NR..][..kc * NR];
                    for ir in (0..mc).step_by(MR) {
                        let mr = MR.min(mc - ir);
                        let ap = &packed_a[(ir / MR) * kc * MR..][..kc * MR];
                        let acc = micro_kernel(kc, ap, bp);
                        // The first depth block overwrites unless accumulating.
                        let store = pc == 0 && !accumulate;
                        for r in 0..mr {
                            let row = &mut c[(ic + ir + r) * n + jc + jr..][..nr];
                            if store {
                                row.copy_from_slice(&acc[r][..nr]);
                            } else {
                                for (dst, &v) in row.iter_mut().zip(&acc[r][..nr]) {
                                    *dst += v;
                                }
                            }
                        }
                    }
                }
                ic += mc;
            }
            pc += kc;
        }
        jc += nc;
    }
}

#[inline(always)]
fn micro_kernel<R: Real>(kc: usize, ap: &[R], bp: &[R]) -> [[R; NR]; MR] {
    let mut acc = [[R::ZERO; NR]; MR];
    for p in 0..kc {
        let a: &[R; MR] = ap[p * MR..p * MR + MR].try_into().unwrap();
        let b: &[R; NR] = bp[p * NR..p * NR + NR].try_into().unwrap();
        for r in 0..MR {
            let ar = a[r];
            let row = &mut acc[r];
            for j in 0..NR {
                row[j] = row[j] + ar * b[j];
            }
        }
    }
    acc
}

/// Packs rows `ic..ic+mc`, depth `pc..pc+kc` of op(a) into MR-row panels,
/// depth-major within a panel. Rows past `mc` are zero padded.
#[allow(clippy::too_many_arguments)]
fn pack_a<R: Real>(trans: bool, a: &[R], m: usize, k: usize, ic: usize, mc: usize, pc: usize, kc: usize, out: &mut Vec<R>) {
    out.clear();
    out.resize(mc.div_ceil(MR) * MR * kc, R::ZERO);
    for (panel, i0) in out.chunks_exact_mut(MR * kc).zip((0..mc).step_by(MR)) {
        let rows = MR.min(mc - i0);
        if trans {
            for (p, dst) in panel.chunks_exact_mut(MR).enumerate() {
                dst[..rows].copy_from_slice(&a[(pc + p) * m + ic + i0..][..rows]);
            }
        } else {
            for r in 0..rows {
                let src = &a[(ic + i0 + r) * k + pc..][..kc];
                for (p, &v) in src.iter().enumerate() {
                    panel[p * MR + r] = v;
                }
            }
        }
    }
}

/// Packs depth `pc..pc+kc`, columns `jc..jc+nc` of op(b) into NR-column
/// panels. Columns past `nc` are zero padded. `out` is refilled in memory
/// order.
#[allow(clippy::too_many_arguments)]
fn pack_b<R: Real>(trans: bool, b: &[R], n: usize, k: usize, pc: usize, kc: usize, jc: usize, nc: usize, out: &mut Vec<R>) {
    out.clear();
    for j0 in (0..nc).step_by(NR) {
        let width = NR.min(nc - j0);
        if trans {
            // Read each source row contiguously and scatter it into the panel.
            let base = out.len();
            out.resize(base + kc * NR, R::ZERO);
            let panel = &mut out[base..];
            for j in 0..width {
                let src = &b[(jc + j0 + j) * k + pc..][..kc];
                for (p, &v) in src.iter().enumerate() {
                    panel[p * NR + j] = v;
                }
            }
            continue;
        }
        for p in 0..kc {
            out.extend_from_slice(&b[(pc + p) * n + jc + j0..][..width]);
            out.extend(std::iter::repeat(R::ZERO).take(NR - width));
        }
    }
}
