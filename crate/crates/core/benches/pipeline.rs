//! Parallel vs sequential timings of the heavy stages on the default
//! 20 x 20 synthetic city.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use urbanprof::classify::{random_forest_fit, Dataset, ForestParams};
use urbanprof::config::Config;
use urbanprof::par;
use urbanprof::poi::CategoryMapping;
use urbanprof::profiles::{build_profiles, count_pois, plan_aggregation, ActivityProfileMatrix};
use urbanprof::spectral::spectral_cluster;
use urbanprof::stats::hopkins;
use urbanprof::synth::{generate, SyntheticCity};
use urbanprof::timeline::{build_tensor, timeline_features, zscore, FeatureMode};

struct Fixture {
    cfg: Config,
    city: SyntheticCity,
    profiles: ActivityProfileMatrix,
}

fn fixture() -> Fixture {
    let mut cfg = Config::default();
    cfg.grid.n_rows = 20;
    cfg.grid.n_cols = 20;
    let city = generate(&cfg.scenario(), &CategoryMapping::default()).unwrap();
    let profiles = profiles_for(&cfg, &city);
    Fixture {
        cfg,
        city,
        profiles,
    }
}

fn profiles_for(cfg: &Config, city: &SyntheticCity) -> ActivityProfileMatrix {
    let counts = count_pois(&cfg.grid, &city.pois);
    let plan = plan_aggregation(
        &cfg.grid,
        &counts,
        cfg.h,
        cfg.radius_step_m,
        cfg.radius_cap_m,
    )
    .unwrap();
    build_profiles(&plan, &counts, &CategoryMapping::default(), cfg.idf_corpus).unwrap()
}

/// Runs `f` once on the rayon pool and once pinned to the calling thread.
fn both<F: Fn() + Copy>(c: &mut Criterion, name: &str, f: F) {
    let mut g = c.benchmark_group(name);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("mode", "parallel"), |b| b.iter(f));
    g.bench_function(BenchmarkId::new("mode", "sequential"), |b| {
        b.iter(|| par::sequential(f))
    });
    g.finish();
}

fn stages(c: &mut Criterion) {
    let fx = fixture();
    let fx = &fx;
    let n = fx.cfg.grid.n_cells();

    both(c, "build_profiles", || {
        black_box(profiles_for(&fx.cfg, &fx.city));
    });
    both(c, "build_tensor", || {
        let t = build_tensor(&fx.city.cdr, n, fx.cfg.month, fx.cfg.utc_offset_min).unwrap();
        black_box(timeline_features(&zscore(&t), FeatureMode::MeanDay));
    });
    both(c, "spectral_cluster", || {
        black_box(spectral_cluster(&fx.profiles, &fx.cfg.spectral_params()).unwrap());
    });
    both(c, "hopkins", || {
        black_box(hopkins(fx.profiles.values.view(), 40, 7).unwrap());
    });

    let data = Dataset::new(
        fx.profiles.values.clone(),
        fx.city.truth.clone(),
        (0..6).map(|c| format!("c{c}")).collect(),
    )
    .unwrap();
    let data = &data;
    both(c, "random_forest_fit", || {
        black_box(random_forest_fit(data, ForestParams::default(), 3).unwrap());
    });
}

criterion_group!(benches, stages);
criterion_main!(benches);
