//! Window geometry: partitioning, cyclic shifts, attention masks and the
//! relative-position lookup.

use crate::error::{Error, Result};

/// Channels-last `h × w × c` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {h}x{w}x{c} map",
                data.len()
            )));
        }
        Ok(FeatureMap { h, w, c, data })
    }
}

fn check_divisible(h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::IndivisibleShape { h, w, window });
    }
    Ok(())
}

/// For each element of the partitioned layout `[num_windows, window², c]`,
/// its flat source index in the `[h, w, c]` map after a cyclic shift of
/// `-shift` along both spatial axes. Windows are in row-major order.
pub fn partition_index(h: usize, w: usize, c: usize, window: usize, shift: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * c);
    for wr in 0..h / window {
        for wc in 0..w / window {
            for i in 0..window {
                for j in 0..window {
                    let r = (wr * window + i + shift) % h;
                    let col = (wc * window + j + shift) % w;
                    let base = (r * w + col) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    index
}

/// Inverse permutation of [`partition_index`].
pub fn reverse_index(h: usize, w: usize, c: usize, window: usize, shift: usize) -> Vec<usize> {
    let fwd = partition_index(h, w, c, window, shift);
    let mut inv = vec![0usize; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

pub fn window_partition(map: &FeatureMap, window: usize) -> Result<Vec<FeatureMap>> {
    check_divisible(map.h, map.w, window)?;
    let index = partition_index(map.h, map.w, map.c, window, 0);
    let block = window * window * map.c;
    Ok(index
        .chunks(block)
        .map(|idx| FeatureMap {
            h: window,
            w: window,
            c: map.c,
            data: idx.iter().map(|&i| map.data[i]).collect(),
        })
        .collect())
}

pub fn window_reverse(blocks: &[FeatureMap], window: usize, h: usize, w: usize) -> Result<FeatureMap> {
    check_divisible(h, w, window)?;
    let expected = (h / window) * (w / window);
    if blocks.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{} windows for a {h}x{w} map, expected {expected}",
            blocks.len()
        )));
    }
    let c = blocks.first().map_or(0, |b| b.c);
    if blocks.iter().any(|b| b.h != window || b.w != window || b.c != c) {
        return Err(Error::ShapeMismatch("inconsistent window blocks".into()));
    }
    let flat: Vec<f64> = blocks.iter().flat_map(|b| b.data.iter().copied()).collect();
    let index = reverse_index(h, w, c, window, 0);
    FeatureMap::new(h, w, c, index.iter().map(|&i| flat[i]).collect())
}

/// Additive attention mask `[num_windows, n, n]` (n = window²) for a shifted
/// partition: 0 where query and key come from the same pre-shift region,
/// `-inf` otherwise.
pub fn shift_mask(h: usize, w: usize, window: usize, shift: usize) -> Vec<f64> {
    let region = |x: usize, len: usize| {
        if x < len - window {
            0
        } else if x < len - shift {
            1
        } else {
            2
        }
    };
    let labels: Vec<usize> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .map(|(r, c)| region(r, h) * 3 + region(c, w))
        .collect();
    let windowed: Vec<usize> = partition_index(h, w, 1, window, 0)
        .into_iter()
        .map(|i| labels[i])
        .collect();
    let n = window * window;
    let mut mask = Vec::with_capacity(windowed.len() * n);
    for win in windowed.chunks(n) {
        for &a in win {
            for &b in win {
                mask.push(if a == b { 0.0 } else { f64::NEG_INFINITY });
            }
        }
    }
    mask
}

/// Row of the `(2w-1)²`-entry bias table used by each query/key pair of a window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut index = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qr, qc) = (q / window, q % window);
        for k in 0..n {
            let (kr, kc) = (k / window, k % window);
            let dr = qr + window - 1 - kr;
            let dc = qc + window - 1 - kc;
            index.push(dr * span + dc);
        }
    }
    index
}

pub fn validate_shift(window: usize, shift: usize) -> Result<()> {
    if shift == 0 || shift == window / 2 && window >= 2 {
        Ok(())
    } else {
        Err(Error::BadShift { shift, window })
    }
}
