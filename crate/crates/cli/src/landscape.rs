//! Landscape grid files.
//!
//! ```text
//! # extent=<f64> resolution=<r> seed=<u64>
//! u\v	<v_0>	…	<v_{r-1}>
//! <u_0>	<L(u_0,v_0)>	…
//! ```

use fairgen::trainer::LandscapeGrid;

pub fn write_grid(grid: &LandscapeGrid, seed: u64) -> String {
    let mut out = format!(
        "# extent={} resolution={} seed={seed}\nu\\v",
        grid.extent, grid.resolution
    );
    for c in &grid.coords {
        out += &format!("\t{c}");
    }
    out.push('\n');
    for (u, row) in grid.coords.iter().zip(&grid.values) {
        out += &u.to_string();
        for v in row {
            out += &format!("\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses a grid file back into its coordinates and values.
pub fn parse_grid(text: &str) -> Result<LandscapeGrid, String> {
    let mut lines = text.lines();
    let head = lines.next().ok_or("empty grid file")?;
    let field = |key: &str| -> Result<&str, String> {
        head.split_whitespace()
            .find_map(|t| t.strip_prefix(key).and_then(|t| t.strip_prefix('=')))
            .ok_or_else(|| format!("header lacks `{key}`"))
    };
    let extent: f64 = field("extent")?.parse().map_err(|_| "bad extent")?;
    let resolution: usize = field("resolution")?.parse().map_err(|_| "bad resolution")?;
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number `{s}`"));
    let axis = lines.next().ok_or("missing axis row")?;
    let coords = axis
        .split('\t')
        .skip(1)
        .map(num)
        .collect::<Result<Vec<_>, _>>()?;
    if coords.len() != resolution {
        return Err(format!(
            "axis has {} entries, expected {resolution}",
            coords.len()
        ));
    }
    let mut values = Vec::with_capacity(resolution);
    for line in lines {
        let cells = line
            .split('\t')
            .skip(1)
            .map(num)
            .collect::<Result<Vec<_>, _>>()?;
        if cells.len() != resolution {
            return Err(format!(
                "row has {} entries, expected {resolution}",
                cells.len()
            ));
        }
        values.push(cells);
    }
    if values.len() != resolution {
        return Err(format!("{} rows, expected {resolution}", values.len()));
    }
    Ok(LandscapeGrid {
        extent,
        resolution,
        coords,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip() {
        let g = LandscapeGrid {
            extent: 0.5,
            resolution: 2,
            coords: vec![-0.5, 0.5],
            values: vec![vec![1.0, 2.0], vec![3.0, 0.1]],
        };
        let text = write_grid(&g, 7);
        assert!(text.starts_with("# extent=0.5 resolution=2 seed=7\n"));
        assert_eq!(parse_grid(&text).unwrap(), g);
        assert!(parse_grid("# extent=1 resolution=3\nu\\v\t0\n").is_err());
    }
}
