//! Gradient-check suites over the primitives, the APM, every block variant
//! and a tiny network. Shared by the `gradcheck` command and the tests.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::apm::{Apm, ApmConfig};
use crate::blocks::{Block, BlockKind, Layout};
use crate::error::{Error, Result};
use crate::network::{Model, NetworkSpec, ReplacementPolicy};
use crate::tensor::gradcheck::{check, gradcheck, random_array, GradcheckReport, PRIMITIVES};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Primitives,
    Apm,
    Blocks,
    Network,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Primitives, Scope::Apm, Scope::Blocks, Scope::Network];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Primitives => "primitives",
            Scope::Apm => "apm",
            Scope::Blocks => "blocks",
            Scope::Network => "network",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scope> {
        Scope::ALL
            .into_iter()
            .find(|v| v.to_string() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck scope '{s}'")))
    }
}

/// Runs every check of `scope`.
pub fn suite(scope: Scope, seed: u64) -> Result<Vec<GradcheckReport>> {
    match scope {
        Scope::Primitives => PRIMITIVES.iter().map(|(op, _)| gradcheck(op, &[], seed)).collect(),
        Scope::Apm => apm_suite(seed),
        Scope::Blocks => blocks_suite(seed),
        Scope::Network => network_suite(seed).map(|r| vec![r]),
    }
}

/// Replaces the zero-initialised gate weights so the gate path carries gradient.
fn randomize_gates<'a>(apms: impl IntoIterator<Item = &'a Apm>, rng: &mut ChaCha8Rng) {
    for apm in apms {
        let fresh = random_array(&apm.w.weight.shape(), rng);
        *apm.w.weight.value_mut() = fresh;
    }
}

/// Neighbour alignment of a 3-frame clip, with and without the gate.
fn apm_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut reports = Vec::new();
    for gate in [true, false] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ApmConfig { embed_divisor: 2, use_contrastive_attention: gate, ..ApmConfig::default() };
        let apm = Apm::new(4, cfg, &mut rng)?;
        randomize_gates([&apm], &mut rng);
        let x = Tensor::param(random_array(&[1, 4, 3, 3, 2], &mut rng));
        let mut named = Vec::new();
        apm.collect("apm", &mut named);
        // Without the gate only g takes part in the output.
        let mut leaves: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
        if !gate {
            leaves.truncate(1);
        }
        leaves.push(x.clone());
        let name = if gate { "apm (with CA)" } else { "apm (without CA)" };
        reports.push(check(name, &leaves, || Tensor::concat(&apm.align_neighbors(&x, &[-1, 1])?, 1), seed, usize::MAX)?);
    }
    Ok(reports)
}

/// APM embeddings are floored at 4 channels: a one-channel cosine is a sign,
/// which jumps where the embedding crosses zero.
fn blocks_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    let apm_cfg = ApmConfig { min_embed_channels: 4, ..ApmConfig::default() };
    let mut reports = Vec::new();
    for kind in BlockKind::ALL {
        for (layout, in_c, mid) in [(Layout::Bottleneck, 8, 2), (Layout::Basic, 4, 4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Block::new(kind, layout, in_c, mid, 1, &apm_cfg, &mut rng)?;
            if let Some(nl) = &b.nonlocal {
                nl.bn.gamma.value_mut().fill(1.0);
            }
            randomize_gates(b.apms(), &mut rng);
            let x = Tensor::param(random_array(&[2, in_c, 3, 3, 3], &mut rng));
            let mut named = Vec::new();
            b.collect("b", &mut named);
            let mut leaves: Vec<Tensor> = named.into_iter().map(|(_, t)| t).collect();
            leaves.push(x.clone());
            let name = format!("{} ({})", kind.name(), if layout == Layout::Basic { "basic" } else { "bottleneck" });
            reports.push(check(&name, &leaves, || b.forward(&x, true), seed, 6)?);
        }
    }
    Ok(reports)
}

/// Tiny AP-P3D-C at width 4 on a two-clip batch; feature and logits are checked jointly.
fn network_suite(seed: u64) -> Result<GradcheckReport> {
    let mut spec = NetworkSpec::from_arch("tiny-ap-p3d-c", ReplacementPolicy::Per2Stage23, 3)?;
    spec.base_width = 4;
    spec.feature_dim = 32;
    let model = Model::new(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randomize_gates(model.apms(), &mut rng);
    let x = Tensor::param(random_array(&[2, 3, 3, 32, 16], &mut rng));
    let mut leaves: Vec<Tensor> = model.parameters().into_iter().map(|(_, t)| t).collect();
    leaves.push(x.clone());
    check(
        "tiny-ap-p3d-c",
        &leaves,
        || {
            let out = model.forward(&x, true)?;
            let logits = out.logits.ok_or_else(|| Error::invalid("network built without classifier"))?;
            Tensor::concat(&[out.feature, logits], 1)
        },
        seed,
        3,
    )
}
