//! Synthetic datasets written to disk.

#![allow(dead_code)]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stepground::io::write_json_atomic;
use stepground::model::TaskSpec;
use stepground::observation::synthetic::{generate_video, VideoShape};

/// Writes two tasks with `videos` annotated videos in total and returns
/// the manifest path.
pub fn write_dataset(root: &Path, videos: usize) -> std::path::PathBuf {
    let tasks = [
        TaskSpec {
            task_id: "tea".into(),
            goal: "make a cup of tea".into(),
            steps: vec![
                "boil water".into(),
                "add tea bag".into(),
                "pour water".into(),
            ],
        },
        TaskSpec {
            task_id: "shelf".into(),
            goal: "assemble a shelf".into(),
            steps: (0..5).map(|i| format!("part {i}")).collect(),
        },
    ];
    for task in &tasks {
        write_json_atomic(&root.join(format!("{}.json", task.task_id)), task).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut entries = Vec::new();
    for k in 0..videos {
        let task = &tasks[k % tasks.len()];
        let video_id = format!("{}_{k}", task.task_id);
        let (ann, _) = generate_video(&mut rng, &video_id, task, &VideoShape::default());
        let ann_name = format!("{video_id}.ann.json");
        write_json_atomic(&root.join(&ann_name), &ann).unwrap();
        entries.push(serde_json::json!({
            "task": format!("{}.json", task.task_id),
            "annotation": ann_name,
        }));
    }
    let manifest = root.join("manifest.json");
    write_json_atomic(&manifest, &serde_json::json!({ "videos": entries })).unwrap();
    manifest
}
