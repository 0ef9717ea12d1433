use std::path::Path;

use super::{ClusterMeans, CHUNK};
use crate::data::{stack_images, LabelledExample};
use crate::error::{contract, Result};
use crate::model::EquiVae;

/// Writes `id, label, r_0.., v_0..` per example: the single-image invariant
/// embedding and the posterior mean given the example's class mean. An empty
/// split produces the header alone.
pub fn export_embeddings(
    model: &EquiVae,
    means: &ClusterMeans,
    examples: &[LabelledExample],
    path: &Path,
) -> Result<()> {
    let (dr, dv) = (model.config().latent_r, model.config().latent_v);
    if means.dim() != dr || means.num_classes() != model.num_classes() {
        return Err(contract("cluster means do not match the model"));
    }
    let mut out = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dr).map(|i| format!("r{i}")));
    header.extend((0..dv).map(|i| format!("v{i}")));
    out.write_record(&header)?;
    for chunk in examples.chunks(CHUNK) {
        let images = stack_images(chunk).expect("non-empty chunk");
        let labels: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        if let Some(&y) = labels.iter().find(|&&y| y >= means.num_classes()) {
            return Err(contract(format!("label {y} has no cluster mean")));
        }
        let r = model.infer_invariant(&images)?;
        let (mu, _) = model.infer_posterior(&means.rows(&labels), &images)?;
        for (i, e) in chunk.iter().enumerate() {
            let mut record = vec![e.id.to_string(), e.label.to_string()];
            record.extend(r.row(i).iter().chain(mu.row(i)).map(|v| v.to_string()));
            out.write_record(&record)?;
        }
    }
    out.flush()?;
    Ok(())
}
