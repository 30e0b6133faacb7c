//! Brute-force model of the localized broadcast, shared by the fabric tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use stencil_core::fabric::{DeliveryMap, Direction, FabricGrid, Source, WINDOW};
use stencil_core::reference::{laplacian, make_coefficients, Grid3D};

/// PE at lane position `pos` of `dir`, on the line through `(x, y)`.
fn along(dir: Direction, x: usize, y: usize, pos: usize, w: usize, h: usize) -> (usize, usize) {
    match dir {
        Direction::East => (pos, y),
        Direction::West => (w - 1 - pos, y),
        Direction::South => (x, pos),
        Direction::North => (x, h - 1 - pos),
    }
}

/// Expected sender of every receive slot, found by walking the five steps:
/// at step `t` the windows are rooted at lane positions `r = t (mod 5)`,
/// including roots before the edge, and cover `r..r + 5`.
pub fn expected_sources(dir: Direction, w: usize, h: usize) -> Vec<[Source; WINDOW]> {
    let mut out = vec![[Source::Missing; WINDOW]; w * h];
    for y in 0..h {
        for x in 0..w {
            let (pos, len) = dir.lane_position(x, y, w, h);
            for t in 0..WINDOW as isize {
                let mut root = t - WINDOW as isize;
                while root < len as isize {
                    let reach = root..root + WINDOW as isize;
                    if reach.contains(&(pos as isize)) {
                        let slot = WINDOW - 1 - (pos as isize - root) as usize;
                        out[y * w + x][slot] = if root < 0 {
                            Source::Boundary
                        } else {
                            let (sx, sy) = along(dir, x, y, root as usize, w, h);
                            Source::Pe { x: sx, y: sy }
                        };
                    }
                    root += WINDOW as isize;
                }
            }
        }
    }
    out
}

/// Compares a delivery map with the enumeration: sources, word counts and
/// word order.
pub fn check_map(map: &DeliveryMap, payload: &[u32]) -> Result<(), String> {
    let (w, h, b) = (map.width, map.height, map.b);
    let expected = expected_sources(map.direction, w, h);
    for y in 0..h {
        for x in 0..w {
            let pe = map.pe(x, y);
            if pe.words.len() != WINDOW * b {
                return Err(format!("({x},{y}) holds {} words", pe.words.len()));
            }
            for s in 0..WINDOW {
                let want = expected[y * w + x][s];
                if pe.sources[s] != want {
                    return Err(format!("({x},{y}) slot {s}: {:?}, expected {want:?}", pe.sources[s]));
                }
                let words = pe.slot(s);
                let ok = match want {
                    Source::Pe { x: sx, y: sy } => words == &payload[(sy * w + sx) * b..][..b],
                    _ => words.iter().all(|&v| v == 0),
                };
                if !ok {
                    return Err(format!("({x},{y}) slot {s}: words {words:?} out of order or wrong"));
                }
            }
        }
    }
    Ok(())
}

/// One randomized fabric: runs a random subset of patterns together, checks
/// every map, per-color conservation and that a rerun is identical.
pub fn random_fabric_case(rng: &mut impl Rng) -> Result<(), String> {
    let w = rng.gen_range(1..=6);
    let h = rng.gen_range(1..=6);
    let b = rng.gen_range(1..=4);
    let cap = rng.gen_range(1..=8);
    let mut dirs = Direction::ALL.to_vec();
    dirs.shuffle(rng);
    dirs.truncate(rng.gen_range(1..=4));
    let payload: Vec<u32> = (0..w * h * b).map(|_| rng.gen_range(1..u32::MAX)).collect();

    let mut fabric = FabricGrid::with_limits(w, h, 24, cap);
    for d in Direction::ALL {
        fabric.install_pattern(d, d.default_colors()).map_err(|e| e.to_string())?;
    }
    let mut again = fabric.clone();
    let tag = format!("{w}x{h} b={b} cap={cap} {dirs:?}");
    let report = fabric.run_patterns(&dirs, b, &payload).map_err(|e| format!("{tag}: {e}"))?;
    for map in &report.maps {
        check_map(map, &payload).map_err(|e| format!("{tag} {:?}: {e}", map.direction))?;
    }
    for d in &dirs {
        let colors = d.default_colors();
        for c in [colors.data, colors.control] {
            let k = fabric.color_counters(c);
            if k.injected_ramp + k.injected_boundary != k.terminated + k.dropped {
                return Err(format!("{tag}: color {c} not conserved: {k:?}"));
            }
        }
        let data = fabric.color_counters(colors.data);
        if data.injected_ramp != (w * h * b) as u64 {
            return Err(format!("{tag}: {} data words injected", data.injected_ramp));
        }
    }
    let rerun = again.run_patterns(&dirs, b, &payload).map_err(|e| e.to_string())?;
    if rerun.maps != report.maps || rerun.cycles != report.cycles {
        return Err(format!("{tag}: rerun differs"));
    }
    for y in 0..h {
        for x in 0..w {
            if fabric.link_counters(x, y) != again.link_counters(x, y) {
                return Err(format!("{tag}: counters differ at ({x},{y})"));
            }
        }
    }
    Ok(())
}

/// Broadcast on a 1 x n row (one PE per column, `n` columns), checked against
/// the enumeration for both horizontal directions.
pub fn row_case(n: usize, b: usize) -> Result<(), String> {
    let payload: Vec<u32> = (0..n * b).map(|i| 1000 + i as u32).collect();
    for dir in [Direction::East, Direction::West] {
        let mut fabric = FabricGrid::with_default_patterns(n, 1).map_err(|e| e.to_string())?;
        let map = fabric.run_broadcast(dir, b, &payload).map_err(|e| e.to_string())?;
        check_map(&map, &payload).map_err(|e| format!("1x{n} b={b} {dir:?}: {e}"))?;
    }
    Ok(())
}

/// Max error of the 64-bit Laplacian of `sin 2πx sin 2πy sin 2πz` over the
/// cells at least four away from the faces, on an `n`³ grid over the unit cube.
pub fn smooth_field_error(n: usize) -> f64 {
    let h = 1.0 / n as f64;
    let grid = Grid3D::uniform(n, n, n, h).unwrap();
    let c = make_coefficients(&grid, 8).unwrap();
    let k2pi = 2.0 * std::f64::consts::PI;
    let u = |i: usize, j: usize, k: usize| {
        (k2pi * i as f64 * h).sin() * (k2pi * j as f64 * h).sin() * (k2pi * k as f64 * h).sin()
    };
    let mut field = vec![0.0f64; grid.len()];
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                field[grid.index(i, j, k)] = u(i, j, k);
            }
        }
    }
    let mut err = 0.0f64;
    for k in 4..n - 4 {
        for j in 4..n - 4 {
            for i in 4..n - 4 {
                let exact = -3.0 * k2pi * k2pi * u(i, j, k);
                err = err.max((laplacian(&field, &grid, &c, i, j, k) - exact).abs());
            }
        }
    }
    err
}

/// Least-squares slope of log error against log spacing.
pub fn convergence_slope(ns: &[usize]) -> f64 {
    let pts: Vec<(f64, f64)> = ns.iter().map(|&n| ((1.0 / n as f64).ln(), smooth_field_error(n).ln())).collect();
    let len = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / len;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / len;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}
