//! Deterministic inputs shared by the benchmarks.

use patchace_core::synth::build_dataset;
use patchace_core::synth::Split;
use patchace_core::{
    assemble_embedding, choose_channel_indices, toy_extract, Dataset, EmbeddingVolume, RngStream,
    SceneParams, SplitConfig,
};

/// 64×64 scenes: 10 normal and 4 anomalous.
pub fn dataset() -> Dataset {
    let (archive, _) = build_dataset(&SceneParams::default(), 10, 4, SplitConfig::default())
        .expect("default scene parameters are valid");
    Dataset::from_archive(archive).expect("fresh archive parses")
}

/// Embedding volumes of one split with `d` channels chosen by seed 0.
pub fn volumes(ds: &Dataset, split: Split, d: usize) -> Vec<EmbeddingVolume> {
    let indices = choose_channel_indices(&mut RngStream::new(0), 112, d).expect("d ≤ 112");
    ds.split(split)
        .iter()
        .map(|e| {
            let pyr = toy_extract(ds.image(e).unwrap(), 0).unwrap();
            assemble_embedding(&pyr, &indices).unwrap()
        })
        .collect()
}
