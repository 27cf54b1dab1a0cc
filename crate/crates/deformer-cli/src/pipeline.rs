//! Pipeline orchestration: run the selected stages in dependency order,
//! skipping any whose manifests show their world is unchanged.

use deformer_core::{Error, Result};

use crate::manifest::{freshness, Freshness, STAGE_ORDER};
use crate::settings::Resolved;
use crate::stages::run_stage;

/// Parses a comma-separated stage list, requiring known names, no
/// duplicates, and dependency order (a subsequence of the canonical order).
fn parse_stages(spec: Option<&str>) -> Result<Vec<&'static str>> {
    let Some(spec) = spec else {
        return Ok(STAGE_ORDER.to_vec());
    };
    let mut chosen = Vec::new();
    let mut last_index = None;
    for raw in spec.split(',') {
        let name = raw.trim();
        let index = STAGE_ORDER
            .iter()
            .position(|s| *s == name)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown stage {name:?}; stages are {}",
                    STAGE_ORDER.join(", ")
                ))
            })?;
        if let Some(prev) = last_index {
            if index <= prev {
                return Err(Error::Config(format!(
                    "stages must be listed in dependency order ({})",
                    STAGE_ORDER.join(" -> ")
                )));
            }
        }
        last_index = Some(index);
        chosen.push(STAGE_ORDER[index]);
    }
    if chosen.is_empty() {
        return Err(Error::Config("empty stage list".into()));
    }
    Ok(chosen)
}

pub fn run_pipeline(rs: &Resolved, stages: Option<&str>, force: bool) -> Result<()> {
    let chosen = parse_stages(stages)?;
    for stage in chosen {
        let want = rs.stage_settings(stage);
        if !force {
            if let Freshness::Fresh = freshness(&rs.run_dir, stage, &want)? {
                println!("[{stage}] skipped (up to date)");
                continue;
            }
        }
        println!("[{stage}] running");
        run_stage(rs, stage)?;
    }
    Ok(())
}
