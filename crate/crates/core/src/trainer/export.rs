//! Raw embedding export for external visualisation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array3;

use crate::data::{model_input, DatasetSplit};
use crate::error::Result;
use crate::models::ModelBundle;
use crate::neighborhood::sample_seed;

/// Writes `id, split, true_label, f0 .. f{d-1}` (tab separated, header
/// first) for every labeled, unlabeled and test sample. Returns the number
/// of data rows.
pub fn export_embeddings(bundle: &ModelBundle, split: &DatasetSplit, frames: usize, seed: u64, path: &Path) -> Result<usize> {
    let truth = split.evaluation_labels();
    let d = bundle.feature_width();
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = vec!["id".to_string(), "split".into(), "true_label".into()];
    header.extend((0..d).map(|i| format!("f{i}")));
    writeln!(out, "{}", header.join("\t"))?;
    let mut rows = 0;
    for (name, pool) in [("labeled", split.labeled()), ("unlabeled", split.unlabeled()), ("test", split.test())] {
        if pool.is_empty() {
            continue;
        }
        let inputs: Vec<Array3<f64>> = pool.iter().map(|s| model_input(s, frames, sample_seed(seed, &s.id))).collect();
        let feats = bundle.translated_features(&inputs)?;
        for (s, f) in pool.iter().zip(feats.rows()) {
            let label = truth.get(&s.id).map(|l| l.to_string()).unwrap_or_default();
            let values: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}\t{name}\t{label}\t{}", s.id, values.join("\t"))?;
            rows += 1;
        }
    }
    out.flush()?;
    Ok(rows)
}
