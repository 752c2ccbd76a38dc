//! Tab-separated training log, one row per iteration.
//!
//! Columns: `iteration epoch l_dis l_fair total eta grad_inf_norm ascent`
//! followed by one `eta_<subgroup>` column per subgroup. Missing values are
//! written as `NA`. Wall time is left out so that the log of a seeded run is
//! reproducible byte for byte.

use fairgen::trainer::StepLog;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

pub fn header(subgroups: &[String]) -> String {
    let mut h = String::from("iteration\tepoch\tl_dis\tl_fair\ttotal\teta\tgrad_inf_norm\tascent");
    for s in subgroups {
        h += &format!("\teta_{s}");
    }
    h.push('\n');
    h
}

pub fn row(r: &StepLog, subgroups: usize) -> String {
    let mut line = format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.iteration,
        r.epoch,
        r.l_dis,
        r.l_fair,
        r.total,
        opt(r.eta),
        r.grad_inf_norm,
        r.ascent
    );
    for j in 0..subgroups {
        line.push('\t');
        line += &opt(r.eta_j.get(j).copied().flatten());
    }
    line.push('\n');
    line
}

/// Keeps the header and the rows with `iteration < keep`.
pub fn truncate(text: &str, keep: u64) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let it = line.split('\t').next().and_then(|v| v.parse::<u64>().ok());
        if i == 0 || it.is_some_and(|it| it < keep) {
            out += line;
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_format() {
        let r = StepLog {
            iteration: 3,
            epoch: 1,
            l_dis: 1.5,
            l_fair: 0.25,
            total: 1.75,
            eta: Some(0.5),
            eta_j: vec![Some(0.1), None],
            grad_inf_norm: 2.0,
            ascent: 0.0,
            wall_time: 12.0,
        };
        assert_eq!(row(&r, 2), "3\t1\t1.5\t0.25\t1.75\t0.5\t2\t0\t0.1\tNA\n");
        assert_eq!(header(&["g0".into()]).split('\t').count(), 9);
    }

    #[test]
    fn truncate_keeps_prefix() {
        let text = "h\n0\ta\n1\tb\n2\tc\n";
        assert_eq!(truncate(text, 2), "h\n0\ta\n1\tb\n");
    }
}
