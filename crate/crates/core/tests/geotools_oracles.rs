mod common;

use common::*;
use proptest::prelude::*;
use urbankg::geometry::{Coordinate, Geometry};
use urbankg::geotools::{self, Rcc5Relation, DEFAULT_RCC_EPS};

#[test]
fn geohash_matches_reference_encoder() {
    for &(lon, lat, want) in GEOHASH_REFERENCE {
        let got = geotools::geohash_encode(&Geometry::Point(Coordinate::new(lon, lat)));
        assert_eq!(got, want, "({lon}, {lat})");
    }
}

#[test]
fn predicates_agree_with_oracles_small() {
    for (tool, tally) in run_predicate_suite(150, 7) {
        assert!(tally.disagreements.is_empty(), "{tool}: {:#?}", &tally.disagreements[..tally.disagreements.len().min(5)]);
    }
}

#[test]
fn rcc5_agrees_with_sampling_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (mut checked, mut seen) = (0, std::collections::BTreeSet::new());
    while checked < 400 {
        let b = random_star(&mut rng, (0.0, 0.0), 0.5, 2.0);
        let a = match rng.gen_range(0..3) {
            0 => random_point(&mut rng, (-2.5, 2.5), (-2.5, 2.5)),
            1 => random_linestring(&mut rng, (-2.5, 2.5), (-2.5, 2.5)),
            _ => {
                let cx = rng.gen_range(-2.0..2.0);
                let cy = rng.gen_range(-2.0..2.0);
                random_star(&mut rng, (cx, cy), 0.1, 1.5)
            }
        };
        if a.coords().windows(2).any(|w| w[0] == w[1]) {
            continue;
        }
        let Some(want) = oracle_rcc5(&a, &b, ORACLE_MARGIN) else { continue };
        checked += 1;
        seen.insert(want);
        let got = geotools::classify_rcc5(&a, &b, DEFAULT_RCC_EPS);
        assert_eq!(got.code(), want, "{a} vs {b}");
    }
    assert_eq!(seen.len(), 3, "DC, IN and PO all exercised: {seen:?}");
}

#[test]
fn rcc5_planted_contact_cases() {
    let sq = |x0: f64, y0: f64, x1: f64, y1: f64| {
        Geometry::Polygon(vec![
            Coordinate::new(x0, y0),
            Coordinate::new(x1, y0),
            Coordinate::new(x1, y1),
            Coordinate::new(x0, y1),
            Coordinate::new(x0, y0),
        ])
    };
    let eps = DEFAULT_RCC_EPS;
    // Shared edge, shared corner, gap inside the tolerance band.
    for b in [sq(1.0, 0.0, 2.0, 1.0), sq(1.0, 1.0, 2.0, 2.0), sq(1.0 + eps / 2.0, 0.0, 2.0, 1.0)] {
        assert_eq!(geotools::classify_rcc5(&sq(0.0, 0.0, 1.0, 1.0), &b, eps), Rcc5Relation::EC, "{b}");
    }
    // Gap well beyond the band.
    assert_eq!(
        geotools::classify_rcc5(&sq(0.0, 0.0, 1.0, 1.0), &sq(1.0 + 3.0 * eps, 0.0, 2.0, 1.0), eps),
        Rcc5Relation::DC
    );
    // Internally tangent.
    assert_eq!(
        geotools::classify_rcc5(&sq(0.0, 0.0, 0.5, 0.5), &sq(0.0, 0.0, 1.0, 1.0), eps),
        Rcc5Relation::IN
    );
}

fn coord() -> impl Strategy<Value = (f64, f64)> {
    (-179.999f64..180.0, -89.999f64..89.999)
}

proptest! {
    #[test]
    fn geohash_prefix_property(p in coord(), k in 1usize..=8) {
        let c = Coordinate::new(p.0, p.1);
        let full = geotools::geohash_encode_coord(c, 8);
        let short = geotools::geohash_encode_coord(c, k);
        prop_assert_eq!(&full[..k], short.as_str());
    }

    #[test]
    fn distance_is_a_metric(a in coord(), b in coord(), c in coord()) {
        let g = |p: (f64, f64)| Geometry::Point(Coordinate::new(p.0, p.1));
        let (ga, gb, gc) = (g(a), g(b), g(c));
        let ab = geotools::distance_km(&ga, &gb);
        prop_assert_eq!(ab, geotools::distance_km(&gb, &ga));
        prop_assert_eq!(geotools::distance_km(&ga, &ga), 0.0);
        prop_assert!(ab >= 0.0);
        let ac = geotools::distance_km(&ga, &gc);
        let cb = geotools::distance_km(&gc, &gb);
        prop_assert!(ab <= ac + cb + 1e-9);
    }
}
