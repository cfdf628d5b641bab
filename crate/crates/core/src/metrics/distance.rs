use crate::error::{shape_check, Result};
use crate::grid::Mask;

/// True pixels with a 4-neighbour that is false or outside the image.
pub fn boundary(mask: &Mask) -> Mask {
    let (rows, cols) = mask.dims();
    Mask::from_fn(rows, cols, |r, c| {
        if !*mask.get(r, c) {
            return false;
        }
        let (r, c) = (r as isize, c as isize);
        [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            .iter()
            .any(|&(y, x)| !mask.get_signed(y, x).copied().unwrap_or(false))
    })
}

/// Lower envelope of parabolas (Felzenszwalb-Huttenlocher) on one line with
/// sample spacing `h`.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(first) = first else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let pos = |q: usize| q as f64 * h;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        out[q] = d * d + f[v[k]];
    }
}

/// Squared physical distance from every pixel to the nearest site.
fn squared_distance_to(sites: &Mask, spacing: [f64; 2]) -> Vec<f64> {
    let (rows, cols) = sites.dims();
    let mut g: Vec<f64> = sites
        .data()
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; rows];
    let mut tmp = vec![0.0; rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = g[r * cols + c];
        }
        edt_1d(&col, spacing[0], &mut tmp);
        for r in 0..rows {
            g[r * cols + c] = tmp[r];
        }
    }
    let mut row = vec![0.0; cols];
    for r in 0..rows {
        edt_1d(&g[r * cols..(r + 1) * cols], spacing[1], &mut row);
        g[r * cols..(r + 1) * cols].copy_from_slice(&row);
    }
    g
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
fn directed(from: &Mask, to: &Mask, spacing: [f64; 2]) -> Vec<f64> {
    let field = squared_distance_to(&boundary(to), spacing);
    boundary(from)
        .data()
        .iter()
        .zip(field)
        .filter(|(&b, _)| b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

/// Linear-interpolated percentile (`q` in [0, 100]) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn symmetric(a: &Mask, b: &Mask, spacing: [f64; 2], q: f64) -> Result<Option<f64>> {
    shape_check("surface distance", a.dims(), b.dims())?;
    if a.count() == 0 || b.count() == 0 {
        return Ok(None);
    }
    let ab = percentile(&directed(a, b, spacing), q).unwrap_or(0.0);
    let ba = percentile(&directed(b, a, spacing), q).unwrap_or(0.0);
    Ok(Some(ab.max(ba)))
}

/// Symmetric 95th-percentile boundary distance in physical units
/// (`spacing` = row, column mm). `None` when either mask is empty.
pub fn hd95(a: &Mask, b: &Mask, spacing: [f64; 2]) -> Result<Option<f64>> {
    symmetric(a, b, spacing, 95.0)
}

/// Classic (100th percentile) Hausdorff distance between mask boundaries.
pub fn hausdorff(a: &Mask, b: &Mask, spacing: [f64; 2]) -> Result<Option<f64>> {
    symmetric(a, b, spacing, 100.0)
}
