use std::fs;
use std::process::Command;

fn run(args: &[&str], cfg: &std::path::Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_urbanprof"))
        .args(args)
        .arg("--quiet")
        .arg("--config")
        .arg(cfg)
        .status()
        .unwrap();
    assert!(status.success(), "{args:?}");
}

#[test]
fn default_city_report_beats_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("city.cfg");
    fs::write(
        &cfg,
        format!(
            "grid.rows = 20\ngrid.cols = 20\nclassify.target = truth\noutput.dir = {}\n",
            out.display()
        ),
    )
    .unwrap();
    run(&["synth"], &cfg);
    run(&["all"], &cfg);

    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    let header = report
        .lines()
        .find(|l| l.starts_with("truth\\pred"))
        .expect("confusion matrix header");
    assert_eq!(header.split_whitespace().count(), 7, "{header}");
    for class in [
        "business",
        "residential",
        "shopping",
        "nightlife",
        "campus",
        "parkland",
    ] {
        assert!(header.contains(class), "{class} missing from {header}");
    }
    assert!(report.contains("1/k baseline (16.67%)"));
    for model in ["random_forest", "knn"] {
        let line = report
            .lines()
            .find(|l| l.trim_start().starts_with(model) && l.contains("baseline"))
            .unwrap_or_else(|| panic!("no baseline line for {model}"));
        assert!(line.contains("above baseline"), "{line}");
    }

    // Everything in the manifest exists with the recorded digest length.
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    let mut rows = manifest.lines();
    assert_eq!(
        rows.next(),
        Some("command,config_hash,seed,artifact,sha256")
    );
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f.len(), 5, "{row}");
        assert!(out.join(f[3]).is_file(), "{row}");
        assert_eq!(f[4].len(), 64);
    }
}
