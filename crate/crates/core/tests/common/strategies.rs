//! Proptest strategies for embedding documents.

use docprobe::embedstore::{AlignmentMap, DocEmbedding};
use ndarray::Array2;
use proptest::prelude::*;

pub fn finite_f32() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO
}

/// Alignment from per-word token widths (0 allowed), a leading offset and
/// trailing special tokens.
pub fn alignment() -> impl Strategy<Value = AlignmentMap> {
    (0u32..2, prop::collection::vec(0u32..3, 0..10), 0u32..2).prop_map(|(lead, widths, trail)| {
        let mut offsets = vec![lead];
        for w in widths {
            offsets.push(offsets.last().unwrap() + w);
        }
        let n_tokens = (*offsets.last().unwrap() + trail) as usize;
        AlignmentMap::from_offsets(offsets, n_tokens).unwrap()
    })
}

pub fn doc_with(id: String, layers: Vec<u32>, dim: usize) -> impl Strategy<Value = DocEmbedding> {
    alignment().prop_flat_map(move |alignment| {
        let n = alignment.n_tokens();
        let layers = layers.clone();
        let id = id.clone();
        prop::collection::vec(finite_f32(), layers.len() * n * dim).prop_map(move |values| {
            let tensors = layers
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let block = values[i * n * dim..(i + 1) * n * dim].to_vec();
                    (l, Array2::from_shape_vec((n, dim), block).unwrap())
                })
                .collect();
            DocEmbedding::new(id.clone(), tensors, alignment.clone()).unwrap()
        })
    })
}

fn layers_and_dim() -> impl Strategy<Value = (Vec<u32>, usize)> {
    (prop::collection::btree_set(0u32..20, 1..4), 1usize..6).prop_map(|(l, d)| (l.into_iter().collect(), d))
}

pub fn doc() -> impl Strategy<Value = DocEmbedding> {
    layers_and_dim().prop_flat_map(|(layers, dim)| doc_with("doc".into(), layers, dim))
}

/// Two sentence embeddings of one document with matching layers and width.
pub fn two_parts() -> impl Strategy<Value = (DocEmbedding, DocEmbedding)> {
    layers_and_dim().prop_flat_map(|(layers, dim)| (doc_with("d".into(), layers.clone(), dim), doc_with("d".into(), layers, dim)))
}

/// All tensor values as raw bits, layer by layer.
pub fn bits(doc: &DocEmbedding) -> Vec<u32> {
    doc.layer_ids()
        .iter()
        .flat_map(|&l| doc.layer(l).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}
