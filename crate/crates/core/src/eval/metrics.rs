use crate::error::{Error, Result};

/// Per-class Dice (%) of hard label maps with labels `0..=num_classes`.
/// Entry `c - 1` is `None` when class `c` is absent from both maps.
pub fn dice_score(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Vec<Option<f64>>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice_score masks", &[gt.len()], &[pred.len()]));
    }
    let mut inter = vec![0usize; num_classes + 1];
    let mut np = vec![0usize; num_classes + 1];
    let mut ng = vec![0usize; num_classes + 1];
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p as usize, g as usize);
        if p <= num_classes {
            np[p] += 1;
        }
        if g <= num_classes {
            ng[g] += 1;
        }
        if p == g && p <= num_classes {
            inter[p] += 1;
        }
    }
    Ok((1..=num_classes)
        .map(|c| {
            let denom = np[c] + ng[c];
            (denom > 0).then(|| 200.0 * inter[c] as f64 / denom as f64)
        })
        .collect())
}

/// Foreground pixels with a 4-neighbour outside the region or the image.
pub fn boundary(mask: &[u8], h: usize, w: usize) -> Vec<(usize, usize)> {
    let fg = |y: usize, x: usize| mask[y * w + x] != 0;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !fg(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !fg(y - 1, x)
                || !fg(y + 1, x)
                || !fg(y, x - 1)
                || !fg(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Squared distance transform of one row: `f` holds 0 on sites and
/// infinity elsewhere (or any sampled function), result in `out`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        out.fill(f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest site.
/// Infinite everywhere if there are no sites.
pub fn squared_distance_transform(sites: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; n];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut tmp[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        tmp[..w].copy_from_slice(row);
        edt_1d(&tmp[..w], row, &mut v, &mut z);
    }
    grid
}

/// Symmetric Hausdorff distance in pixels between the boundaries of two
/// binary masks. `None` when either region is empty.
pub fn hausdorff(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<Option<f64>> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::shape("hausdorff masks", &[h * w, h * w], &[pred.len(), gt.len()]));
    }
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        let dt = squared_distance_transform(to, h, w);
        from.iter().map(|&(y, x)| dt[y * w + x]).fold(0.0, f64::max)
    };
    Ok(Some(directed(&bp, &bg).max(directed(&bg, &bp)).sqrt()))
}

/// Hausdorff distance of every class `1..=num_classes` of two label maps.
pub fn hausdorff_per_class(pred: &[u8], gt: &[u8], h: usize, w: usize, num_classes: usize) -> Result<Vec<Option<f64>>> {
    (1..=num_classes as u8)
        .map(|c| {
            let p: Vec<u8> = pred.iter().map(|&v| u8::from(v == c)).collect();
            let g: Vec<u8> = gt.iter().map(|&v| u8::from(v == c)).collect();
            hausdorff(&p, &g, h, w)
        })
        .collect()
}
