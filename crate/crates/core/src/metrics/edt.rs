/// Exact squared Euclidean distance from every pixel of an `h`×`w` grid to
/// the nearest of `sites`, by two passes of the lower-envelope-of-parabolas
/// transform. Pixels get `f64::INFINITY` when `sites` is empty.
pub fn squared_distance_transform(h: usize, w: usize, sites: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in sites {
        grid[y * w + x] = 0.0;
    }
    if sites.is_empty() {
        return grid;
    }
    let mut buf = Vec::new();
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        transform_1d(row, &mut buf);
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        transform_1d(&mut col, &mut buf);
        for y in 0..h {
            grid[y * w + x] = col[y];
        }
    }
    grid
}

/// In-place 1-D transform `d(p) = min_q (p − q)² + f(q)`.
fn transform_1d(f: &mut [f64], out: &mut Vec<f64>) {
    let n = f.len();
    // Parabola apexes forming the lower envelope and the boundaries between them.
    let mut v: Vec<usize> = Vec::with_capacity(n);
    let mut z: Vec<f64> = Vec::with_capacity(n + 1);
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}
