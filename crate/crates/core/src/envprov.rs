//! Per-process compute environments: each `EnvSpec` resolves to a command
//! prefix that runs the task inside the environment, plus a fingerprint that
//! takes part in task identity.
//!
//! Nothing here installs software. Providers only compute wrappers; the
//! wrapper commands themselves (a container runtime, a module system, or the
//! `envwrap` stub used in tests) are configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::digest::Digest;
use crate::model::{EnvSpec, Package};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedEnv {
    pub wrapper: Vec<String>,
    pub fingerprint: Digest,
    pub provider: String,
    pub spec: EnvSpec,
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("no provider registered for environment variant `{0}`")]
    UnknownProvider(String),
    #[error("recipe file {0} is missing")]
    MissingRecipe(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid provider configuration: {0}")]
    Config(String),
}

pub trait EnvProvider: Send + Sync {
    fn name(&self) -> &str;
    fn resolve(&self, spec: &EnvSpec, base_dir: &Path) -> Result<ResolvedEnv, EnvError>;
}

fn sorted_manifest(pkgs: &[Package]) -> Vec<&Package> {
    let mut sorted: Vec<&Package> = pkgs.iter().collect();
    sorted.sort();
    sorted
}

/// Canonical manifest text: entries sorted by (name, version).
pub fn canonical_manifest(pkgs: &[Package]) -> String {
    let list: Vec<serde_json::Value> = sorted_manifest(pkgs)
        .into_iter()
        .map(|p| serde_json::json!({"name": p.name, "version": p.version}))
        .collect();
    canonical::encode(&serde_json::Value::Array(list))
}

/// Environment identity, independent of which provider runs it.
pub fn env_fingerprint(spec: &EnvSpec, base_dir: &Path) -> Result<Digest, EnvError> {
    Ok(match spec {
        EnvSpec::None => Digest::of_bytes(b"env:none"),
        EnvSpec::Manifest(pkgs) => Digest::of_bytes(format!("env:manifest:{}", canonical_manifest(pkgs))),
        EnvSpec::Image(reference) => Digest::of_bytes(format!("env:image:{reference}")),
        EnvSpec::Recipe(rel) => {
            let path = base_dir.join(rel);
            if !path.is_file() {
                return Err(EnvError::MissingRecipe(path));
            }
            let bytes = std::fs::read(&path).map_err(|source| EnvError::Io { path, source })?;
            let mut pre = b"env:recipe:".to_vec();
            pre.extend_from_slice(&bytes);
            Digest::of_bytes(pre)
        }
    })
}

fn expand(template: &[String], vars: &BTreeMap<&str, String>) -> Vec<String> {
    template
        .iter()
        .map(|arg| vars.iter().fold(arg.clone(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v)))
        .collect()
}

pub struct NoneProvider;

impl EnvProvider for NoneProvider {
    fn name(&self) -> &str {
        "none"
    }

    fn resolve(&self, spec: &EnvSpec, base_dir: &Path) -> Result<ResolvedEnv, EnvError> {
        Ok(ResolvedEnv {
            wrapper: Vec::new(),
            fingerprint: env_fingerprint(spec, base_dir)?,
            provider: self.name().into(),
            spec: spec.clone(),
        })
    }
}

/// Maps a package list onto a search-path prefix. With a package root,
/// `<root>/<name>/<version>/bin` directories are put in front of `PATH`.
pub struct ManifestProvider {
    pub wrapper: Vec<String>,
    pub package_root: Option<PathBuf>,
}

impl Default for ManifestProvider {
    fn default() -> Self {
        ManifestProvider {
            wrapper: ["env", "FLOWFORGE_PACKAGES={packages}", "PATH={search_path}"].map(String::from).to_vec(),
            package_root: None,
        }
    }
}

impl EnvProvider for ManifestProvider {
    fn name(&self) -> &str {
        "manifest"
    }

    fn resolve(&self, spec: &EnvSpec, base_dir: &Path) -> Result<ResolvedEnv, EnvError> {
        let EnvSpec::Manifest(pkgs) = spec else {
            return Err(EnvError::UnknownProvider(spec.variant().into()));
        };
        let sorted = sorted_manifest(pkgs);
        let packages = sorted.iter().map(|p| format!("{}-{}", p.name, p.version)).collect::<Vec<_>>().join(":");
        let mut search: Vec<String> = match &self.package_root {
            Some(root) => sorted
                .iter()
                .map(|p| root.join(&p.name).join(&p.version).join("bin").to_string_lossy().into_owned())
                .collect(),
            None => Vec::new(),
        };
        if let Ok(path) = std::env::var("PATH") {
            search.push(path);
        }
        let vars = BTreeMap::from([("packages", packages), ("search_path", search.join(":"))]);
        Ok(ResolvedEnv {
            wrapper: expand(&self.wrapper, &vars),
            fingerprint: env_fingerprint(spec, base_dir)?,
            provider: self.name().into(),
            spec: spec.clone(),
        })
    }
}

/// Image references and build recipes both run through a container-run prefix.
pub struct ContainerProvider {
    pub wrapper: Vec<String>,
}

impl Default for ContainerProvider {
    fn default() -> Self {
        ContainerProvider { wrapper: ["envwrap", "run", "{ref}", "--"].map(String::from).to_vec() }
    }
}

impl EnvProvider for ContainerProvider {
    fn name(&self) -> &str {
        "container"
    }

    fn resolve(&self, spec: &EnvSpec, base_dir: &Path) -> Result<ResolvedEnv, EnvError> {
        let reference = match spec {
            EnvSpec::Image(r) => r.clone(),
            EnvSpec::Recipe(rel) => base_dir.join(rel).to_string_lossy().into_owned(),
            other => return Err(EnvError::UnknownProvider(other.variant().into())),
        };
        let fingerprint = env_fingerprint(spec, base_dir)?;
        let vars = BTreeMap::from([("ref", reference)]);
        Ok(ResolvedEnv { wrapper: expand(&self.wrapper, &vars), fingerprint, provider: self.name().into(), spec: spec.clone() })
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProviderConfig {
    manifest: Option<ManifestConfig>,
    image: Option<WrapperConfig>,
    recipe: Option<WrapperConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestConfig {
    wrapper: Option<Vec<String>>,
    package_root: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WrapperConfig {
    wrapper: Vec<String>,
}

/// Variant name → provider.
#[derive(Clone)]
pub struct EnvRegistry {
    providers: BTreeMap<String, Arc<dyn EnvProvider>>,
}

impl Default for EnvRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl EnvRegistry {
    pub fn empty() -> Self {
        EnvRegistry { providers: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let container: Arc<dyn EnvProvider> = Arc::new(ContainerProvider::default());
        let mut reg = Self::empty();
        reg.register("none", Arc::new(NoneProvider));
        reg.register("manifest", Arc::new(ManifestProvider::default()));
        reg.register("image", container.clone());
        reg.register("recipe", container);
        reg
    }

    pub fn register(&mut self, variant: &str, provider: Arc<dyn EnvProvider>) {
        self.providers.insert(variant.to_string(), provider);
    }

    /// Builds the registry from TOML text with optional `[manifest]`,
    /// `[image]` and `[recipe]` tables; absent tables keep the defaults.
    pub fn from_toml(text: &str) -> Result<Self, EnvError> {
        let cfg: ProviderConfig = toml::from_str(text).map_err(|e| EnvError::Config(e.to_string()))?;
        let mut reg = Self::builtin();
        if let Some(m) = cfg.manifest {
            let mut provider = ManifestProvider::default();
            if let Some(w) = m.wrapper {
                provider.wrapper = w;
            }
            provider.package_root = m.package_root;
            reg.register("manifest", Arc::new(provider));
        }
        if let Some(i) = cfg.image {
            reg.register("image", Arc::new(ContainerProvider { wrapper: i.wrapper }));
        }
        if let Some(r) = cfg.recipe {
            reg.register("recipe", Arc::new(ContainerProvider { wrapper: r.wrapper }));
        }
        Ok(reg)
    }

    pub fn from_file(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    pub fn resolve(&self, spec: &EnvSpec, base_dir: &Path) -> Result<ResolvedEnv, EnvError> {
        let provider =
            self.providers.get(spec.variant()).ok_or_else(|| EnvError::UnknownProvider(spec.variant().into()))?;
        provider.resolve(spec, base_dir)
    }
}

pub fn resolve_env(spec: &EnvSpec, providers: &EnvRegistry, base_dir: &Path) -> Result<ResolvedEnv, EnvError> {
    providers.resolve(spec, base_dir)
}
