//! Regenerates the bundled fixture under `fixtures/`.
//!
//!     cargo run -p sltraj-cli --example make_fixture

use std::error::Error;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sltraj::synthetic::{generate, to_raw_records, AnomalyKind, MixtureConfig, Planted};

const TITLES: [&str; 4] = ["Quick note", "My review", "Update", "Second order"];

fn main() -> Result<(), Box<dyn Error>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    fs::create_dir_all(&dir)?;
    let cfg = MixtureConfig {
        cluster_sizes: vec![60, 60],
        records: (8, 14),
        planted: vec![
            Planted { cluster: 0, count: 2, kind: AnomalyKind::Score { component: 0, shift_sd: 8.0 } },
            Planted { cluster: 1, count: 2, kind: AnomalyKind::Window { a: 0.5, b: 0.75, shift: 4.0 } },
        ],
        with_text: true,
        seed: 20240611,
        ..Default::default()
    };
    let syn = generate(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
    w.write_record(["subject_id", "timestamp", "text", "v1", "v2"])?;
    for r in to_raw_records(&syn.dataset) {
        let v = r.vector.unwrap();
        // a few text-only rows exercise the embedding stage
        let blank = rng.random::<f64>() < 0.03;
        let cell = |x: f64| if blank { String::new() } else { format!("{x:.6}") };
        w.write_record([r.subject_id, format!("{:.6}", r.timestamp), r.text.unwrap_or_default(), cell(v[0]), cell(v[1])])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("covariates.csv"))?;
    w.write_record(["subject_id", "z1", "z2"])?;
    for s in &syn.dataset.subjects {
        w.write_record([s.subject_id.clone(), format!("{:.6}", s.covariates[0]), format!("{:.6}", s.covariates[1])])?;
    }
    w.flush()?;

    let mut lines = String::new();
    for s in syn.dataset.subjects.iter().take(12) {
        for r in s.records.iter().take(4) {
            let title = TITLES[rng.random_range(0..TITLES.len())];
            let line = serde_json::json!({
                "subject_id": s.subject_id,
                "timestamp": (r.time * 1e4).round() / 1e4,
                "text": r.text,
                "metadata": {"title": title},
            });
            lines.push_str(&line.to_string());
            lines.push('\n');
        }
    }
    fs::write(dir.join("text_only.jsonl"), lines)?;

    let truth: Vec<String> = syn.anomalies.keys().map(|&i| syn.dataset.subjects[i].subject_id.clone()).collect();
    fs::write(dir.join("planted.txt"), truth.join("\n") + "\n")?;
    Ok(())
}
