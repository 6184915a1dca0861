use fdgan_core::synth::{make_dataset, SampleRecord, CENTER_RANGE, NUM_CLASSES, SCALE_RANGE};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const BINS: usize = 4;

fn bin(v: f64, (lo, hi): (f64, f64)) -> usize {
    (((v - lo) / (hi - lo) * BINS as f64) as usize).min(BINS - 1)
}

/// p-value of Pearson's independence test on a contingency table.
fn independence_p(table: &[Vec<usize>]) -> f64 {
    let n: usize = table.iter().flatten().sum();
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..table[0].len()).map(|j| table.iter().map(|r| r[j]).sum::<usize>() as f64).collect();
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = rows[i] * cols[j] / n as f64;
            stat += (o as f64 - e).powi(2) / e;
        }
    }
    let dof = ((rows.len() - 1) * (cols.len() - 1)) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

fn table(records: &[SampleRecord], attr: impl Fn(&SampleRecord) -> usize) -> Vec<Vec<usize>> {
    let mut t = vec![vec![0; BINS]; NUM_CLASSES];
    for r in records {
        t[r.content.class_index()][attr(r)] += 1;
    }
    t
}

#[test]
fn nuisance_is_independent_of_content() {
    let records = make_dataset(10_000, 3).unwrap();
    let attrs: [(&str, Box<dyn Fn(&SampleRecord) -> usize>); 4] = [
        ("cx", Box::new(|r| bin(r.nuisance.cx, CENTER_RANGE))),
        ("cy", Box::new(|r| bin(r.nuisance.cy, CENTER_RANGE))),
        ("rotation", Box::new(|r| bin(r.nuisance.rotation, (0.0, 360.0)))),
        ("scale", Box::new(|r| bin(r.nuisance.scale, SCALE_RANGE))),
    ];
    for (name, f) in attrs {
        let p = independence_p(&table(&records, f));
        assert!(p > 0.01, "{name}: p = {p}");
    }
}

#[test]
fn the_independence_test_rejects_a_coupled_attribute() {
    let records = make_dataset(10_000, 3).unwrap();
    // bin determined partly by the class: strongly dependent
    let p = independence_p(&table(&records, |r| (r.content.class_index() + bin(r.nuisance.cx, CENTER_RANGE) / 2) % BINS));
    assert!(p < 1e-6, "{p}");
}
