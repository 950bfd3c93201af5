//! Versioned JSON containers. Floats are written with round-trip precision,
//! so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world_model::WorldModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    payload: T,
}

#[derive(Deserialize)]
struct Header {
    kind: String,
    version: u32,
}

pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let env = Envelope {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        payload,
    };
    let text = serde_json::to_string(&env)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} file, found {}", header.kind)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} is not supported (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    let env: Envelope<T> = serde_json::from_str(&text)?;
    Ok(env.payload)
}

pub const MODEL_KIND: &str = "tdgrpc-model";

pub fn save_model(path: &Path, model: &WorldModel) -> Result<()> {
    save(path, MODEL_KIND, model)
}

pub fn load_model(path: &Path) -> Result<WorldModel> {
    let m: WorldModel = load(path, MODEL_KIND)?;
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ActionBox;
    use crate::world_model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = WorldModel::new(3, ActionBox::symmetric(1, 2.0), ModelConfig::default(), 0.995, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&p, &m).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
    }

    #[test]
    fn wrong_kind_or_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        save(&p, "other", &1u32).unwrap();
        assert!(matches!(load::<u32>(&p, "mine"), Err(Error::Checkpoint(_))));
        fs::write(&p, r#"{"kind":"mine","version":99,"payload":1}"#).unwrap();
        assert!(matches!(load::<u32>(&p, "mine"), Err(Error::Checkpoint(_))));
    }
}
