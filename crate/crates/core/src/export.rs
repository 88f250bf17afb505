//! CSV exports. Floats use the shortest representation that round-trips.

use crate::grid::{FieldMatrix, Grid};
use crate::simulate::{PathEvent, PathRecord};

/// Shortest round-trip decimal form of `v`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a header and rows to an in-memory CSV document.
pub fn csv_document<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn coords(grid: &Grid, k: usize) -> Vec<String> {
    let x = grid.coord(k);
    (0..grid.dim()).map(|a| num(x[a])).collect()
}

fn coord_header(grid: &Grid) -> Vec<&'static str> {
    if grid.dim() == 1 {
        vec!["x"]
    } else {
        vec!["x", "y"]
    }
}

/// One row per `(node, regime, state)`; indices are 1-based except nodes.
pub fn field_csv(grid: &Grid, u: &FieldMatrix) -> String {
    let mut header = vec!["node"];
    header.extend(coord_header(grid));
    header.extend(["regime", "state", "value"]);
    let rows = (0..grid.len()).flat_map(|k| {
        (0..u.m).flat_map(move |l| {
            (0..u.n).map(move |s| {
                let mut r = vec![k.to_string()];
                r.extend(coords(grid, k));
                r.extend([
                    (l + 1).to_string(),
                    (s + 1).to_string(),
                    num(u.get(l, s, k)),
                ]);
                r
            })
        })
    });
    csv_document(&header, rows)
}

/// Event log of sampled paths: one row per switch, jump and stop.
pub fn paths_csv(paths: &[PathRecord]) -> String {
    let header = ["path", "time", "event", "from", "to", "x", "y", "cost"];
    let mut rows = Vec::new();
    for p in paths {
        for e in &p.events {
            let (kind, time, from, to) = match *e {
                PathEvent::Switch { time, from, to } => ("switch", time, from, to),
                PathEvent::Jump { time, from, to } => ("jump", time, from, to),
            };
            rows.push(vec![
                p.path_index.to_string(),
                num(time),
                kind.into(),
                (from + 1).to_string(),
                (to + 1).to_string(),
                String::new(),
                String::new(),
                String::new(),
            ]);
        }
        rows.push(vec![
            p.path_index.to_string(),
            num(p.stop_time),
            if p.censored { "censored" } else { "exit" }.into(),
            (p.final_regime + 1).to_string(),
            (p.final_state + 1).to_string(),
            num(p.final_point[0]),
            p.final_point.get(1).map_or(String::new(), |y| num(*y)),
            num(p.total()),
        ]);
    }
    csv_document(&header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Domain;

    #[test]
    fn field_rows_round_trip() {
        let grid = Grid::uniform(&Domain::interval(0.0, 1.0).unwrap(), 3).unwrap();
        let mut u = FieldMatrix::zeros(1, 2, &grid, crate::grid::FieldKind::Other);
        u.set(0, 1, 1, 0.1 + 0.2);
        let text = field_csv(&grid, &u);
        let mut r = csv::Reader::from_reader(text.as_bytes());
        assert_eq!(
            r.headers().unwrap(),
            vec!["node", "x", "regime", "state", "value"]
        );
        let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 6);
        assert_eq!(&rows[3][1], "0.5");
        assert_eq!(rows[3][4].parse::<f64>().unwrap(), 0.1 + 0.2);
    }
}
