use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use memprobe::corpus::{load_dataset, Document};
use memprobe::lm::{train_ngram, HttpScorer, NGramModel, Scorer};
use memprobe::probe::TemplateId;
use memprobe::selector::{FilterModel, HeuristicNameDetector, SelectionConfig};
use memprobe::target::{ChatClient, Completer, EndpointConfig, ResponseCache, SalientWordResponder, StubModel};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: PathBuf,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub scorer: Option<ScorerSpec>,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub filters: Vec<FilterSpec>,
    #[serde(default)]
    pub target: Option<ModelSpec>,
    #[serde(default)]
    pub informative: Option<ModelSpec>,
    #[serde(default)]
    pub person: PersonSpec,
    #[serde(default)]
    pub templates: TemplateSpec,
    #[serde(default)]
    pub baseline: BaselineSpec,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_beta() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerSpec {
    Ngram {
        corpus: Vec<PathBuf>,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Http {
        url: String,
        #[serde(default)]
        top_n: Option<usize>,
    },
}

fn default_order() -> usize {
    3
}

fn default_alpha() -> f64 {
    1e-4
}

fn default_recall() -> f64 {
    1.0
}

fn default_k() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Local n-gram stand-in, optionally contaminated with stored documents.
    Stub {
        #[serde(default)]
        name: Option<String>,
        corpus: Vec<PathBuf>,
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_recall")]
        recall: f64,
        /// Extra JSONL files whose documents the stub stores verbatim.
        #[serde(default)]
        memorize: Vec<PathBuf>,
        /// Store every dataset document labeled as a member.
        #[serde(default)]
        memorize_members: bool,
    },
    /// Local informative-word picker: the rarest words under a reference corpus.
    Salient {
        corpus: Vec<PathBuf>,
        #[serde(default = "default_k")]
        k: usize,
    },
    Http(EndpointConfig),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    #[serde(default = "default_filter_template")]
    pub template: TemplateId,
    pub model: ModelSpec,
}

fn default_filter_template() -> TemplateId {
    TemplateId::FilterGuess
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonSpec {
    /// Newline-separated names that are always flagged.
    pub gazetteer: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateSpec {
    pub probe: TemplateId,
    pub prefix: TemplateId,
}

impl Default for TemplateSpec {
    fn default() -> Self {
        TemplateSpec {
            probe: TemplateId::FictionCloze,
            prefix: TemplateId::PrefixFiction,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSpec {
    pub prefix_words: usize,
    pub holdout_fraction: f64,
    /// Output budget for prefix continuations on HTTP targets.
    pub max_output_tokens: u32,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            prefix_words: 50,
            holdout_fraction: 0.2,
            max_output_tokens: 256,
        }
    }
}

/// A config with its relative paths resolved against the config file.
pub struct Loaded {
    pub cfg: PipelineConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { cfg, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.out_dir)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir().join(name)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.resolve(&self.cfg.dataset)
    }

    /// Fails early when a referenced input file is missing.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths = vec![self.cfg.dataset.clone()];
        if let Some(ScorerSpec::Ngram { corpus, .. }) = &self.cfg.scorer {
            paths.extend(corpus.iter().cloned());
        }
        let models = self
            .cfg
            .target
            .iter()
            .chain(self.cfg.informative.iter())
            .chain(self.cfg.filters.iter().map(|f| &f.model));
        for m in models {
            match m {
                ModelSpec::Stub { corpus, memorize, .. } => paths.extend(corpus.iter().chain(memorize).cloned()),
                ModelSpec::Salient { corpus, .. } => paths.extend(corpus.iter().cloned()),
                ModelSpec::Http(_) => {}
            }
        }
        paths.extend(self.cfg.person.gazetteer.iter().cloned());
        for p in paths {
            let r = self.resolve(&p);
            if !r.exists() {
                bail!("referenced path does not exist: {}", r.display());
            }
        }
        Ok(())
    }

    pub fn load_docs(&self, paths: &[PathBuf]) -> Result<Vec<Document>> {
        let mut docs = Vec::new();
        for p in paths {
            let path = self.resolve(p);
            let ds = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
            docs.extend(ds.into_documents());
        }
        Ok(docs)
    }

    pub fn ngram(&self, corpus: &[PathBuf], order: usize, alpha: f64) -> Result<NGramModel> {
        let docs = self.load_docs(corpus)?;
        Ok(train_ngram(&docs, order, alpha)?)
    }

    pub fn scorer(&self) -> Result<Box<dyn Scorer>> {
        match &self.cfg.scorer {
            None => bail!("this command needs a [scorer] section"),
            Some(ScorerSpec::Ngram { corpus, order, alpha }) => Ok(Box::new(self.ngram(corpus, *order, *alpha)?)),
            Some(ScorerSpec::Http { url, top_n }) => Ok(Box::new(HttpScorer::new(url.clone(), *top_n)?)),
        }
    }

    /// An uncontaminated stub, for commands that store documents themselves.
    pub fn bare_stub(&self, spec: &ModelSpec) -> Result<StubModel> {
        match spec {
            ModelSpec::Stub {
                name,
                corpus,
                order,
                alpha,
                recall,
                ..
            } => {
                let base = Arc::new(self.ngram(corpus, *order, *alpha)?);
                Ok(StubModel::new(name.clone().unwrap_or_else(|| "stub".into()), base).with_recall(*recall, self.cfg.seed))
            }
            _ => bail!("this command needs a stub target (kind = \"stub\")"),
        }
    }

    pub fn completer(
        &self,
        spec: &ModelSpec,
        members: &[Document],
        cache: &Arc<ResponseCache>,
    ) -> Result<Arc<dyn Completer>> {
        match spec {
            ModelSpec::Stub {
                memorize,
                memorize_members,
                ..
            } => {
                let mut stub = self.bare_stub(spec)?.contaminate(&self.load_docs(memorize)?);
                if *memorize_members {
                    stub = stub.contaminate(members);
                }
                Ok(Arc::new(stub))
            }
            ModelSpec::Salient { corpus, k } => {
                let reference = Arc::new(self.ngram(corpus, 1, 1.0)?);
                Ok(Arc::new(SalientWordResponder::new("salient", reference, *k)))
            }
            ModelSpec::Http(endpoint) => Ok(Arc::new(ChatClient::new(endpoint.clone(), Arc::clone(cache))?)),
        }
    }

    /// The target as used for prefix probing: HTTP endpoints get the longer output budget.
    pub fn prefix_spec(&self, spec: &ModelSpec) -> ModelSpec {
        match spec {
            ModelSpec::Http(endpoint) => ModelSpec::Http(EndpointConfig {
                max_output_tokens: self.cfg.baseline.max_output_tokens,
                ..endpoint.clone()
            }),
            other => other.clone(),
        }
    }

    pub fn filters(&self, members: &[Document], cache: &Arc<ResponseCache>) -> Result<Vec<FilterModel>> {
        self.cfg
            .filters
            .iter()
            .map(|f| Ok(FilterModel::new(self.completer(&f.model, members, cache)?, f.template)))
            .collect()
    }

    pub fn name_detector(&self) -> Result<HeuristicNameDetector> {
        match &self.cfg.person.gazetteer {
            None => Ok(HeuristicNameDetector::default()),
            Some(p) => {
                let path = self.resolve(p);
                let text =
                    std::fs::read_to_string(&path).with_context(|| format!("reading gazetteer {}", path.display()))?;
                Ok(HeuristicNameDetector::with_gazetteer(
                    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string),
                ))
            }
        }
    }

    pub fn cache(&self) -> Result<Arc<ResponseCache>> {
        Ok(Arc::new(match &self.cfg.cache {
            Some(p) => {
                let path = self.resolve(p);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent)?;
                }
                ResponseCache::open(&path)?
            }
            None => ResponseCache::in_memory(),
        }))
    }
}
