mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rad_core::image::ImageBuffer;
use rad_core::retrieval::{
    build_index, retrieve_context, ContextSample, Descriptor, DescriptorIndex, PoolItem, Provenance, QueryMode,
    RetrievalConfig, RetrievalStatus,
};
use rad_core::segment::SegmentMap;
use rad_core::{DepthMap, SeededRng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(dim: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_index(n: usize, dim: usize, scenes: u32, rng: &mut SeededRng) -> DescriptorIndex {
    let pool = (0..n as u64)
        .map(|id| PoolItem::Descriptor {
            id,
            scene_id: rng.gen_range(0..scenes),
            descriptor: Descriptor::from_raw(&gaussian(dim, rng)),
        })
        .collect();
    build_index(pool).unwrap()
}

#[test]
fn knn_equals_exhaustive_scan() {
    let mut rng = SeededRng::new(11);
    let index = random_index(1000, 128, 50, &mut rng);
    for m in [1, 4, 16] {
        for _ in 0..25 {
            let q = Descriptor::from_raw(&gaussian(128, &mut rng));
            let scene = rng.gen_range(0..50);
            let got = index.knn_query(&q, m, Some(scene)).unwrap();
            assert_eq!(got.ids(), common::exhaustive_knn(index.entries(), &q, m, Some(scene)));
            assert!(got.hits.iter().all(|h| h.scene_id != scene));
            let unrestricted = index.knn_query(&q, m, None).unwrap();
            assert_eq!(unrestricted.ids(), common::exhaustive_knn(index.entries(), &q, m, None));
        }
    }
}

#[test]
fn all_same_scene_yields_no_eligible() {
    let mut rng = SeededRng::new(2);
    let index = random_index(20, 8, 1, &mut rng);
    let q = Descriptor::from_raw(&gaussian(8, &mut rng));
    let r = index.knn_query(&q, 4, Some(0)).unwrap();
    assert!(r.hits.is_empty());
    assert_eq!(r.status, rad_core::retrieval::KnnStatus::NoEligible);
}

#[test]
fn index_file_round_trip() {
    let mut rng = SeededRng::new(5);
    let index = random_index(64, 16, 8, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pool.radd");
    index.save(&path).unwrap();
    let back = DescriptorIndex::load(&path).unwrap();
    assert_eq!(back.entries(), index.entries());
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"RADD");
    assert_eq!(bytes.len(), 16 + 64 * 16 * 4 + 64 * 8 + 64 * 4);
}

#[test]
fn wrong_magic_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.radd");
    std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
    assert!(DescriptorIndex::load(&path).is_err());
}

fn patterned(seed: u64, w: usize, h: usize) -> ImageBuffer {
    let mut rng = SeededRng::new(seed);
    let (a, b, c): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    ImageBuffer::from_fn(w, h, |u, v| {
        let s = ((u / 4 + v / 4) % 2) as f64;
        [a * s + 0.1, b * (1.0 - s) + 0.1, c]
    })
}

#[test]
fn retrieval_never_returns_the_query_scene() {
    let (w, h) = (16, 16);
    let mut store = BTreeMap::new();
    let mut items = Vec::new();
    let images: Vec<ImageBuffer> = (0..12).map(|i| patterned(i, w, h)).collect();
    for (i, img) in images.iter().enumerate() {
        let scene = (i / 3) as u32;
        let depth = DepthMap::from_fn(w, h, |_, _| Some(1.0 + i as f64));
        store.insert(i as u64, ContextSample::new(img.clone(), depth, scene, Provenance::Retrieved).unwrap());
        items.push(PoolItem::Image { id: i as u64, scene_id: scene, image: img });
    }
    let index = build_index(items).unwrap();
    let model = |img: &ImageBuffer| -> rad_core::Result<DepthMap> {
        Ok(DepthMap::from_fn(img.width(), img.height(), |u, v| Some(1.0 + img.get(u, v)[0])))
    };
    let seg = SegmentMap::new(w, h, (0..w * h).map(|i| ((i % w) / 8) as u32).collect(), 2).unwrap();
    for mode in [QueryMode::UncertaintyMasked, QueryMode::Global] {
        let cfg = RetrievalConfig { m: 4, mode, ..RetrievalConfig::default() };
        for (i, img) in images.iter().enumerate() {
            let scene = (i / 3) as u32;
            let out = retrieve_context(img, scene, &model, &seg, &index, &store, &cfg, &mut SeededRng::new(i as u64)).unwrap();
            assert_eq!(out.status, RetrievalStatus::Ok);
            assert_eq!(out.contexts.len(), 4);
            assert!(out.hits.iter().all(|h| h.scene_id != scene));
            assert!(out.contexts.iter().all(|c| c.scene_id != scene && c.provenance == Provenance::Retrieved));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hits_are_sorted_and_bounded(seed in 0u64..100_000, m in 1usize..20) {
        let mut rng = SeededRng::new(seed);
        let index = random_index(60, 12, 6, &mut rng);
        let q = Descriptor::from_raw(&gaussian(12, &mut rng));
        let r = index.knn_query(&q, m, Some(0)).unwrap();
        prop_assert!(r.hits.len() <= m);
        for w in r.hits.windows(2) {
            prop_assert!(w[0].similarity > w[1].similarity || (w[0].similarity == w[1].similarity && w[0].id < w[1].id));
        }
        prop_assert!(r.hits.iter().all(|h| (-1.0 - 1e-6..=1.0 + 1e-6).contains(&h.similarity)));
    }
}
