use std::path::PathBuf;

use faceswap::eval::{evaluate, retrieval_accuracy, Adapters, LabelledFace};
use faceswap::pipeline::synthetic::SynthConfig;
use faceswap::{AlignedFace, Error};

fn faces() -> Vec<(String, Vec<AlignedFace<f64>>)> {
    let store = SynthConfig {
        identities: 4,
        per_identity: 4,
        resolution: 32,
        seed: 21,
    }
    .store::<f64>();
    store.identities().map(|(id, f)| (id.to_string(), f.to_vec())).collect()
}

fn labelled(items: impl IntoIterator<Item = (String, AlignedFace<f64>)>) -> Vec<LabelledFace<f64>> {
    items
        .into_iter()
        .enumerate()
        .map(|(i, (label, f))| (PathBuf::from(format!("{label}/{i:03}.png")), f.with_source_id(label)))
        .collect()
}

#[test]
fn retrieval_counts_nearest_gallery_labels() {
    let g = |id: &str, v: [f64; 3]| (id.to_string(), v.to_vec());
    let gallery = [g("a", [1.0, 0.0, 0.0]), g("b", [0.0, 1.0, 0.0]), g("c", [0.0, 0.0, 1.0])];
    let queries = [g("a", [5.0, 1.0, 0.0]), g("b", [0.2, 3.0, 0.1]), g("c", [1.0, 0.0, 0.5])];
    assert!((retrieval_accuracy(&queries, &gallery).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!(matches!(retrieval_accuracy(&[g("z", [1.0, 0.0, 0.0])], &gallery), Err(Error::InvalidFace(_))));
    assert!(matches!(retrieval_accuracy(&queries, &[]), Err(Error::EmptyGallery)));
}

/// Pass-through swaps bracket the metrics: returning the source keeps its
/// identity, returning the target keeps pose and expression exactly.
#[test]
fn pass_through_swaps_bracket_the_metrics() {
    let ids = faces();
    let gallery: Vec<(String, AlignedFace<f64>)> =
        ids.iter().flat_map(|(id, f)| f.iter().map(move |x| (id.clone(), x.clone()))).collect();
    // Target i of identity k receives the identity of k + 1.
    let mut targets = Vec::new();
    let mut sources = Vec::new();
    for (k, (_, f)) in ids.iter().enumerate() {
        let (src_id, src) = &ids[(k + 1) % ids.len()];
        for (i, t) in f.iter().enumerate() {
            targets.push((src_id.clone(), t.clone()));
            sources.push((src_id.clone(), src[i].clone()));
        }
    }
    let reference = labelled(targets.clone());
    let adapters = Adapters::<f64>::stubs().unwrap();

    let keep_target = evaluate(&labelled(targets), &reference, &gallery, &adapters).unwrap();
    assert_eq!(keep_target.pose_l2, Some(0.0));
    assert_eq!(keep_target.expression_l2, Some(0.0));
    assert!(keep_target.fid.unwrap() < 1e-6);

    let keep_source = evaluate(&labelled(sources), &reference, &gallery, &adapters).unwrap();
    assert!(keep_source.id_retrieval.unwrap() > keep_target.id_retrieval.unwrap());
    assert!(keep_source.pose_l2.unwrap() > 0.0);
    // Same multiset of faces in another order: the distributions match.
    assert!(keep_source.fid.unwrap() < 1e-6);
    assert_eq!(keep_source.n_images, 16);
}

#[test]
fn swapped_faces_need_a_reference_at_the_same_path() {
    let ids = faces();
    let swapped = labelled([(ids[0].0.clone(), ids[0].1[0].clone())]);
    let mut reference = swapped.clone();
    reference[0].0 = PathBuf::from("elsewhere.png");
    let adapters = Adapters::<f64>::stubs().unwrap();
    let gallery = vec![(ids[0].0.clone(), ids[0].1[1].clone())];
    assert!(matches!(evaluate(&swapped, &reference, &gallery, &adapters), Err(Error::Unpaired(_))));
}

#[test]
fn disabled_metrics_stay_null() {
    let ids = faces();
    let set = labelled(ids[0].1.iter().map(|f| (ids[0].0.clone(), f.clone())));
    let report = evaluate(&set, &set, &[], &Adapters::default()).unwrap();
    assert_eq!((report.id_retrieval, report.pose_l2, report.expression_l2, report.fid), (None, None, None, None));
    assert!(report.extractors.is_empty());
}
