use std::collections::BTreeMap;

use super::surrogate::{ConvSurrogate, ConvSurrogateParams, MeanFill};
use super::{EditBackend, EditorConfig};
use crate::error::{Error, Result};

pub type BackendFactory = Box<dyn Fn(&EditorConfig) -> Result<Box<dyn EditBackend>> + Send + Sync>;

/// Maps string ids from configs and the CLI to backend constructors.
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        Self::with_defaults()
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// `surrogate-mean`, `surrogate-conv`, `sd15-inpaint` and `instruct-edit`.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register("surrogate-mean", Box::new(|_| Ok(Box::new(MeanFill))))
            .expect("fresh registry");
        r.register(
            "surrogate-conv",
            Box::new(|cfg| {
                Ok(Box::new(ConvSurrogate::new(ConvSurrogateParams {
                    gain: cfg.surrogate_gain,
                    center: cfg.surrogate_center,
                    ..Default::default()
                })))
            }),
        )
        .expect("fresh registry");
        for id in ["sd15-inpaint", "instruct-edit"] {
            r.register(id, Box::new(move |cfg| pretrained_backend(id, cfg)))
                .expect("fresh registry");
        }
        r
    }

    pub fn register(&mut self, id: impl Into<String>, factory: BackendFactory) -> Result<()> {
        let id = id.into();
        if self.factories.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.factories.insert(id, factory);
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    pub fn resolve(&self, id: &str, cfg: &EditorConfig) -> Result<Box<dyn EditBackend>> {
        let factory = self.factories.get(id).ok_or_else(|| Error::UnknownId {
            kind: "edit backend",
            id: id.to_string(),
            available: self.ids(),
        })?;
        factory(cfg)
    }
}

/// Slot for diffusion backends whose weights and model code live outside
/// this crate; register a working factory under the same id to use one.
fn pretrained_backend(id: &str, cfg: &EditorConfig) -> Result<Box<dyn EditBackend>> {
    let dir = cfg
        .weights_dir()
        .map(|d| d.display().to_string())
        .unwrap_or_else(|| "<unset>".into());
    Err(Error::ArtifactMissing(format!(
        "backend `{id}` has no built-in implementation (weights dir {dir}); register an adapter for it"
    )))
}
