use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{load_named, Backbone};
use crate::error::{Error, Result};
use crate::framework::strategy::{build_block_modules, ModuleHook};
use crate::framework::{BlockModule, RunConfig, SegHead, Strategy};
use crate::numerics::{checkpoint, seeded, Parameter, Tape, Var};
use crate::spm::{init_m0, spm_forward, ClassPrior, SpmParams};

/// Which part of the model a tensor belongs to, for parameter accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    /// Prompt matchers and side / adapter modules.
    Prompt,
    Head,
}

/// Trainable element counts per group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub prompt: usize,
    pub head: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.backbone + self.prompt + self.head
    }
}

/// Frozen (or partly trainable) backbone stages with optional prompt
/// matchers at insertion points `1..=N+1`, followed by a segmentation head.
#[derive(Clone, Debug)]
pub struct StagePipeline {
    pub backbone: Backbone,
    /// Entry `p - 1` holds the matcher for insertion point `p`.
    pub spms: Vec<Option<SpmParams>>,
    pub modules: Vec<Vec<BlockModule>>,
    pub head: SegHead,
    pub strategy: Strategy,
    pub iterations: usize,
    pub prior: ClassPrior,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// `(insertion point, interim maps)` for every present matcher.
    pub interim: Vec<(usize, Vec<Var>)>,
}

fn at_point(e: Error, point: usize) -> Error {
    match e {
        Error::Shape { op, detail } => Error::Shape { op, detail: format!("insertion point {point}: {detail}") },
        other => other,
    }
}

impl StagePipeline {
    /// Builds head, matchers and side modules around `backbone` and sets
    /// trainable flags for `cfg.strategy`. `Scratch` replaces the backbone
    /// with a fresh random one built from its own config.
    pub fn new(cfg: &RunConfig, backbone: Backbone, prior: ClassPrior) -> Result<Self> {
        cfg.validate()?;
        prior.validate()?;
        let classes = cfg.data.classes;
        if prior.probs.len() != classes {
            return Err(Error::config("prior", format!("{} entries for {classes} classes", prior.probs.len())));
        }
        // independent streams, so adding matchers never changes the head's initialization
        let stream = |k: u64| {
            let mut r = seeded(cfg.train.seed);
            r.set_stream(k);
            r
        };
        let mut rng = stream(1);
        let mut backbone = match cfg.strategy {
            Strategy::Scratch => backbone.config.build()?,
            _ => backbone,
        };
        let n = backbone.num_stages();
        let mut spms: Vec<Option<SpmParams>> = vec![None; n + 1];
        if cfg.strategy == Strategy::PromptMatched {
            let spm_cfg = cfg.spm.spm_config();
            for &p in &cfg.spm.stages {
                let cf = backbone.channels_at(p - 1);
                spms[p - 1] = Some(SpmParams::new(&format!("spm{p}"), cf, classes, &spm_cfg, &mut rng)?);
            }
        }
        let modules = build_block_modules(cfg.strategy, &backbone, &cfg.modules, &mut stream(2))?;
        let head = SegHead::new("head", backbone.channels_at(n), cfg.head.channels, classes, &mut stream(3))?;

        match cfg.strategy {
            Strategy::Full | Strategy::Scratch => {
                backbone.frozen = false;
                backbone.params_mut().into_iter().for_each(|p| p.trainable = true);
            }
            Strategy::Bias => {
                backbone.frozen = false;
                backbone.params_mut().into_iter().for_each(|p| p.trainable = p.name.ends_with(".bias"));
            }
            _ => backbone.freeze(),
        }
        Ok(StagePipeline { backbone, spms, modules, head, strategy: cfg.strategy, iterations: cfg.spm.iterations, prior })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn spm_points(&self) -> Vec<usize> {
        self.spms.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(i, _)| i + 1).collect()
    }

    pub fn forward(&self, tape: &mut Tape, image: Var) -> Result<ForwardOutput> {
        let (_, _, img_h, img_w) = tape.value(image).dims4()?;
        let n_stages = self.backbone.num_stages();
        let hook = ModuleHook { strategy: self.strategy, modules: &self.modules };
        let hook = (!self.modules.is_empty()).then_some(&hook as &dyn crate::backbone::UnitHook);

        let mut f = self.backbone.run_stage(tape, 0, image)?;
        let mut map: Option<Var> = None;
        let mut interim = Vec::new();
        for point in 1..=n_stages + 1 {
            if let Some(spm) = &self.spms[point - 1] {
                let m = match map {
                    Some(m) => m,
                    None => {
                        let (n, _, h, w) = tape.value(f).dims4()?;
                        let m0 = init_m0(&self.prior, n, h, w)?;
                        tape.constant(m0.into_tensor())
                    }
                };
                let out = spm_forward(tape, f, m, spm, self.iterations).map_err(|e| at_point(e, point))?;
                f = out.feature;
                map = Some(out.map);
                interim.push((point, out.interim));
            }
            if point <= n_stages {
                f = self.backbone.run_stage_hooked(tape, point, f, hook).map_err(|e| at_point(e, point))?;
            }
        }
        let logits = self.head.forward(tape, f, img_h, img_w)?;
        Ok(ForwardOutput { logits, interim })
    }

    /// Every tensor with its accounting group.
    pub fn grouped_params(&self) -> Vec<(Group, &Parameter)> {
        let mut out: Vec<(Group, &Parameter)> = self.backbone.params().into_iter().map(|p| (Group::Backbone, p)).collect();
        for s in self.spms.iter().flatten() {
            out.extend(s.params().into_iter().map(|p| (Group::Prompt, p)));
        }
        for m in self.modules.iter().flatten() {
            out.extend(m.params().into_iter().map(|p| (Group::Prompt, p)));
        }
        out.extend(self.head.params().into_iter().map(|p| (Group::Head, p)));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(Group, &mut Parameter)> {
        let mut out: Vec<(Group, &mut Parameter)> =
            self.backbone.params_mut().into_iter().map(|p| (Group::Backbone, p)).collect();
        for s in self.spms.iter_mut().flatten() {
            out.extend(s.params_mut().into_iter().map(|p| (Group::Prompt, p)));
        }
        for m in self.modules.iter_mut().flatten() {
            out.extend(m.params_mut().into_iter().map(|p| (Group::Prompt, p)));
        }
        out.extend(self.head.params_mut().into_iter().map(|p| (Group::Head, p)));
        out
    }

    /// Names of the tensors the optimizer updates.
    pub fn registry(&self) -> Vec<&str> {
        self.grouped_params().into_iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.name.as_str()).collect()
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (g, p) in self.grouped_params() {
            if !p.trainable {
                continue;
            }
            match g {
                Group::Backbone => c.backbone += p.numel(),
                Group::Prompt => c.prompt += p.numel(),
                Group::Head => c.head += p.numel(),
            }
        }
        c
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        checkpoint::encode(self.grouped_params().into_iter().map(|(_, p)| (p.name.as_str(), &p.value)))
    }

    /// Writes all tensors to `path` and `{config, prior}` to the `.json` sidecar.
    pub fn save(&self, path: &Path, cfg: &RunConfig) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        let sidecar = Sidecar { config: cfg.clone(), prior: self.prior.clone(), provenance: self.backbone.provenance.clone() };
        std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Rebuilds the pipeline described by the sidecar and loads its tensors.
    pub fn load(path: &Path) -> Result<(StagePipeline, RunConfig)> {
        let entries = checkpoint::load(path)?;
        let text = std::fs::read_to_string(path.with_extension("json"))
            .map_err(|e| Error::Checkpoint(format!("sidecar: {e}")))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("sidecar: {e}")))?;
        let mut backbone = sidecar.config.backbone.build()?;
        backbone.provenance = sidecar.provenance;
        let mut pipe = StagePipeline::new(&sidecar.config, backbone, sidecar.prior)?;
        load_named(pipe.params_mut().into_iter().map(|(_, p)| p), entries)?;
        Ok((pipe, sidecar.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: RunConfig,
    prior: ClassPrior,
    provenance: String,
}
