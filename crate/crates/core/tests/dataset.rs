//! Dataset generation: directory layout, loaders, and regeneration.

use std::collections::BTreeMap;
use std::path::Path;

use vid4d_core::scenes::{build_dataset, DatasetHandle, DatasetSpec, Split};
use vid4d_core::video::ImageBuf;

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        train_scenes: 2,
        test_scenes: 1,
        views: 8,
        master_frames: 8,
        clip_frames: 4,
        stride: 2,
        size: 9,
        n_samples: 24,
        seed: 11,
    }
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn dataset_layout_loaders_and_regeneration() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let root_a = tmp.path().join("a");
    let manifest = build_dataset(&spec, &root_a).unwrap();

    assert_eq!(manifest.train_ids, vec![0, 1]);
    assert_eq!(manifest.test_ids, vec![2]);
    assert!(manifest.train_ids.iter().all(|id| !manifest.test_ids.contains(id)));
    assert_eq!(manifest.ortho_views, [4, 6, 0, 2]);
    assert_eq!(manifest.clip_indices, vec![0, 2, 4, 6]);

    // Every scene directory holds all views, and each view holds exactly the
    // strided clip frames named by master index.
    for id in 0..3 {
        let sdir = root_a.join("scenes").join(format!("{id:04}"));
        assert!(sdir.join("scene.json").is_file());
        for v in 0..spec.views {
            let vdir = sdir.join(format!("view{v:02}"));
            let mut names: Vec<String> = std::fs::read_dir(&vdir)
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            names.sort();
            assert_eq!(
                names,
                vec!["frame00.png", "frame02.png", "frame04.png", "frame06.png"],
                "scene {id} view {v}"
            );
        }
    }

    let ds = DatasetHandle::open(&root_a).unwrap();
    assert_eq!(ds.manifest, manifest);
    for id in 0..3 {
        let record = ds.load_record(id).unwrap();
        assert_eq!(record.id, id);
        assert_eq!(record.split, if id < 2 { Split::Train } else { Split::Test });

        let sample = ds.load_sample(id).unwrap();
        assert_eq!(sample.mono.shape(), &[4, 3, 9, 9]);
        assert_eq!(sample.ortho.len(), 4);
        for clip in &sample.ortho {
            assert_eq!(clip.shape(), &[4, 3, 9, 9]);
        }

        // The monocular clip is the recorded ring view, loaded either way.
        let direct = ds.load_view_clip(id, record.mono_view).unwrap();
        assert_eq!(*sample.mono.data(), *direct.data());
    }

    // Clip tensors index frames in clip order: slice f of the loaded tensor
    // is the PNG named by the f-th master index.
    let clip = ds.load_view_clip(1, 3).unwrap();
    let png = ImageBuf::load_png(
        &root_a.join("scenes/0001/view03/frame04.png"),
    )
    .unwrap();
    let frame = 3 * 9 * 9;
    assert_eq!(clip.data()[2 * frame..3 * frame], png.data[..]);

    // A second build from the same spec is byte-identical.
    let root_b = tmp.path().join("b");
    build_dataset(&spec, &root_b).unwrap();
    let (a, b) = (tree_bytes(&root_a), tree_bytes(&root_b));
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        b.keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    for (name, bytes) in &a {
        assert_eq!(bytes, &b[name], "{name} differs between builds");
    }
}
