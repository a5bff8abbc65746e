//! TOML run configuration with unknown-key detection.

use std::path::Path;

use mapd::config::RunConfig;

use crate::error::CliError;

pub fn load(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
}

/// Parses a config, rejecting keys that no field consumes.
pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    let mut unknown = Vec::new();
    let de = toml::Deserializer::new(text);
    let config: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
        .map_err(|e| CliError::config(e.to_string().trim().replace('\n', " ")))?;
    if let Some(path) = unknown.first() {
        return Err(CliError::config(describe_unknown(text, path)));
    }
    validate(&config)?;
    Ok(config)
}

fn validate(c: &RunConfig) -> Result<(), CliError> {
    c.scenario.validate()?;
    c.swarm.swarm_config(&c.scenario, c.seed)?;
    c.model.validate()?;
    if c.trajectories.slots == 0 || !(c.trajectories.dt > 0.0) {
        return Err(CliError::config("trajectories.slots and trajectories.dt must be positive"));
    }
    Ok(())
}

fn describe_unknown(text: &str, path: &str) -> String {
    let (parent, key) = path.rsplit_once('.').unwrap_or(("", path));
    let mut msg = format!("unknown key `{path}`");
    if let Some(line) = find_line(text, parent, key) {
        msg.push_str(&format!(" at line {line}"));
    }
    if let Some(best) = nearest(parent, key) {
        msg.push_str(&format!("; did you mean `{best}`?"));
    }
    msg
}

/// Line (1-based) where `key` is assigned inside table `[table]`.
fn find_line(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            current = h.trim_matches(|c| c == '[' || c == ' ').to_string();
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs = lhs.trim().trim_matches('"');
        let full = if current.is_empty() { lhs.to_string() } else { format!("{current}.{lhs}") };
        if full == format!("{table}.{key}").trim_start_matches('.') {
            return Some(i + 1);
        }
    }
    None
}

/// Closest valid key under `parent`, by Jaro-Winkler similarity.
fn nearest(parent: &str, key: &str) -> Option<String> {
    let mut node = toml::Value::try_from(RunConfig::default()).ok()?;
    for seg in parent.split('.').filter(|s| !s.is_empty()) {
        node = node.get(seg)?.clone();
    }
    let table = node.as_table()?;
    let mut names: Vec<&String> = table.keys().collect();
    // Optional carrier settings are omitted when unset.
    let extra = [String::from("frequency_hz"), String::from("wavelength_m")];
    if parent == "scenario" {
        names.extend(extra.iter());
    }
    names
        .into_iter()
        .map(|n| (strsim::jaro_winkler(key, n), n))
        .filter(|(s, _)| *s > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, n)| n.clone())
}
