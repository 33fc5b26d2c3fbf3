//! Replays a reference trend grid through categorization and ranking.

use lexmap::trend::rank_pairs;
use lexmap::{Category, CoefficientCell, FactorId, Thresholds, YearBucket};

// (act, factor, max coef, max year, marks per bucket: H high, M moderate, L low, - blank)
const ROWS: &[(&str, usize, f64, i32, &str)] = &[
    ("Section 10(b) of the Exchange Act", 0, 1.899, 2018, "HHHMLHHH"),
    ("Section 17(a) of the Securities Act", 0, 1.970, 2022, "HHHHLHHM"),
    ("Section 5 of the Securities Act", 0, 1.408, 2023, "HLLHLMHH"),
    ("Section 14(e) of the Exchange Act", 1, 1.550, 2016, "HHL--LL-"),
    ("Section 13(a) of the Exchange Act", 1, 1.156, 2020, "--LLHHML"),
    ("Section 12(g) of the Exchange Act", 1, 1.156, 2020, "--LLHLL-"),
    ("Section 17(b) of the Securities Act", 2, 1.678, 2023, "--LLLHHH"),
    ("Section 206(4) of the Advisers Act", 2, 1.067, 2018, "--H--LLH"),
    ("Section 12(k) of the Exchange Act", 2, 1.851, 2018, "-LHH---H"),
    ("Section 5(a) of the Securities Act", 3, 1.816, 2016, "HLHLLLHM"),
    ("Section 5(c) of the Securities Act", 3, 1.816, 2016, "HLHLLLHM"),
    ("Section 15(a) of the Exchange Act", 3, 1.582, 2021, "L-HL-HMM"),
    ("Section 13(a) of the Exchange Act", 4, 1.330, 2023, "--LLLHLH"),
    ("Section 15(b) of the Exchange Act", 4, 1.408, 2019, "M-LHLMHM"),
    ("Section 3(a) of the Exchange Act", 4, 1.876, 2017, "MHH--L-M"),
    ("Section 10(b) of the Exchange Act", 5, 1.904, 2020, "HMLHHLML"),
    ("Section 20(a) of the Exchange Act", 5, 1.178, 2022, "--H---HL"),
    ("Section 12(a) of the Securities Act", 5, 1.270, 2019, "--HH-L-L"),
];

fn synth_cells() -> Vec<CoefficientCell> {
    let t = Thresholds::default();
    let mut cells = Vec::new();
    for &(act, f, max, year, marks) in ROWS {
        let factor = FactorId::new(f).unwrap();
        let max_bucket = YearBucket::for_year(year);
        for (bucket, mark) in YearBucket::all().zip(marks.chars()) {
            let z = match mark {
                _ if bucket == max_bucket => max,
                'H' => 1.0 + (max - 1.0) / 2.0,
                'M' => 0.75,
                'L' => 0.25,
                _ => {
                    cells.push(CoefficientCell::absent(act, factor, bucket));
                    continue;
                }
            };
            cells.push(CoefficientCell {
                act: act.into(),
                factor,
                bucket,
                raw: Some(z),
                standardized: Some(z),
                category: t.categorize(z),
            });
        }
    }
    cells
}

#[test]
fn printed_maxima_are_high_in_their_year() {
    let t = Thresholds::default();
    for &(act, _, max, year, marks) in ROWS {
        assert_eq!(t.categorize(max), Category::High, "{act}");
        let b = YearBucket::for_year(year).index();
        assert_eq!(marks.as_bytes()[b], b'H', "{act} {year}");
    }
}

#[test]
fn ranking_recovers_max_and_high_counts() {
    let ranked = rank_pairs(&synth_cells());
    for &(act, f, max, year, marks) in ROWS {
        let p = ranked
            .iter()
            .find(|p| p.act == act && p.factor.index() == f)
            .unwrap();
        assert_eq!(p.high_year_count, marks.matches('H').count(), "{act}");
        assert_eq!(p.max_coef, max);
        assert_eq!(p.max_coef_bucket, YearBucket::for_year(year));
    }
}

#[test]
fn high_count_ties_break_on_max_coefficient() {
    // Both financial-misconduct pairs are high in six buckets; the larger
    // maximum ranks first.
    let ranked = rank_pairs(&synth_cells());
    let fm: Vec<&str> = ranked
        .iter()
        .filter(|p| p.factor.index() == 0)
        .map(|p| p.act.as_str())
        .collect();
    assert_eq!(
        fm,
        [
            "Section 17(a) of the Securities Act",
            "Section 10(b) of the Exchange Act",
            "Section 5 of the Securities Act"
        ]
    );
}
