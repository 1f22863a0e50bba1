use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};
use crate::vocab::MultimodalVocab;

/// How text representations reach the top speech layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionType {
    /// Cross-attention over a window of text positions in every top layer.
    Attention,
    /// Aligned text representation added once to the top-stack input.
    AddInput,
    /// Aligned text representation added before every top layer's FFN.
    AddPerLayer,
}

impl FromStr for FusionType {
    type Err = OmniError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionType::Attention),
            "add_input" | "add-input" => Ok(FusionType::AddInput),
            "add_per_layer" | "add-per-layer" => Ok(FusionType::AddPerLayer),
            other => Err(OmniError::Config(format!("unknown fusion type {other:?}"))),
        }
    }
}

impl fmt::Display for FusionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionType::Attention => "attention",
            FusionType::AddInput => "add_input",
            FusionType::AddPerLayer => "add_per_layer",
        })
    }
}

/// Number of text positions visible to each speech position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WindowRepr", into = "WindowRepr")]
pub enum FusionWindow {
    Finite(usize),
    Unbounded,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Num(usize),
    Word(String),
}

impl TryFrom<WindowRepr> for FusionWindow {
    type Error = OmniError;

    fn try_from(r: WindowRepr) -> Result<Self> {
        match r {
            WindowRepr::Num(n) => FusionWindow::finite(n),
            WindowRepr::Word(w) => w.parse(),
        }
    }
}

impl From<FusionWindow> for WindowRepr {
    fn from(w: FusionWindow) -> Self {
        match w {
            FusionWindow::Finite(n) => WindowRepr::Num(n),
            FusionWindow::Unbounded => WindowRepr::Word("inf".into()),
        }
    }
}

impl FusionWindow {
    pub fn finite(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(OmniError::Config("fusion window must be at least 1".into()));
        }
        Ok(FusionWindow::Finite(n))
    }
}

impl FromStr for FusionWindow {
    type Err = OmniError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "∞" | "unbounded" => Ok(FusionWindow::Unbounded),
            n => FusionWindow::finite(
                n.parse()
                    .map_err(|_| OmniError::Config(format!("bad fusion window {n:?}")))?,
            ),
        }
    }
}

impl fmt::Display for FusionWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionWindow::Finite(n) => write!(f, "{n}"),
            FusionWindow::Unbounded => f.write_str("inf"),
        }
    }
}

/// Source of the per-position input rows of the top speech stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopInput {
    /// Bottom-stack encodings of the generated units (shared with CTC tracking).
    BottomStack,
    /// Raw unit embeddings.
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub n_core_layers: usize,
    pub n_bottom_layers: usize,
    pub n_top_layers: usize,
    pub text_size: u32,
    pub unit_size: u32,
    pub fusion_type: FusionType,
    pub fusion_window: FusionWindow,
    pub wait_k: usize,
    pub max_units_per_token: usize,
    pub vision_feature_dim: usize,
    pub vision_tokens_per_image: usize,
    pub top_input: TopInput,
    pub remove_input_blanks: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            ffn_mult: 4,
            n_core_layers: 4,
            n_bottom_layers: 2,
            n_top_layers: 2,
            text_size: 64,
            unit_size: 32,
            fusion_type: FusionType::Attention,
            fusion_window: FusionWindow::Finite(5),
            wait_k: 3,
            max_units_per_token: 20,
            vision_feature_dim: 32,
            vision_tokens_per_image: 16,
            top_input: TopInput::BottomStack,
            remove_input_blanks: false,
        }
    }
}

impl ModelConfig {
    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            ffn_mult: 2,
            n_core_layers: 1,
            n_bottom_layers: 1,
            n_top_layers: 1,
            text_size: 6,
            unit_size: 4,
            vision_feature_dim: 4,
            vision_tokens_per_image: 2,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OmniError::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return bad("head dimension must be even for rotary positions".into());
        }
        if self.n_core_layers == 0 || self.n_bottom_layers == 0 || self.n_top_layers == 0 {
            return bad("every layer stack needs at least one layer".into());
        }
        if self.ffn_mult == 0 || self.vision_feature_dim == 0 || self.vision_tokens_per_image == 0 {
            return bad("ffn_mult and vision dimensions must be positive".into());
        }
        if self.wait_k == 0 {
            return bad("wait_k must be at least 1".into());
        }
        if self.max_units_per_token == 0 {
            return bad("max_units_per_token must be at least 1".into());
        }
        if let FusionWindow::Finite(0) = self.fusion_window {
            return bad("fusion window must be at least 1".into());
        }
        self.vocab().map(|_| ())
    }

    pub fn vocab(&self) -> Result<MultimodalVocab> {
        MultimodalVocab::new(self.text_size, self.unit_size)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    /// Unit head width: every unit plus the unit-eos symbol.
    pub fn unit_head_width(&self) -> usize {
        self.unit_size as usize + 1
    }

    /// Local index of the unit-eos symbol in the unit head.
    pub fn unit_eos(&self) -> usize {
        self.unit_size as usize
    }
}

/// Text positions (1-based, inclusive) fused into the speech position whose
/// alignment count is `aligned`: `[max(1, aligned + 2 - W), aligned + 1]`.
pub fn fusion_window(aligned: usize, window: FusionWindow, text_len: usize) -> Result<(usize, usize)> {
    let end = aligned + 1;
    if end > text_len {
        return Err(OmniError::Scheduling(format!(
            "fusion window ends at text position {end} but only {text_len} text positions exist"
        )));
    }
    let start = match window {
        FusionWindow::Finite(w) => (end + 1).saturating_sub(w).max(1),
        FusionWindow::Unbounded => 1,
    };
    Ok((start, end))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_examples() {
        let w5 = FusionWindow::Finite(5);
        assert_eq!(fusion_window(4, w5, 10).unwrap(), (1, 5));
        assert_eq!(fusion_window(0, w5, 10).unwrap(), (1, 1));
        assert_eq!(fusion_window(9, FusionWindow::Finite(2), 10).unwrap(), (9, 10));
        assert_eq!(fusion_window(6, FusionWindow::Unbounded, 7).unwrap(), (1, 7));
        assert!(fusion_window(7, w5, 7).is_err());
    }

    #[test]
    fn window_upper_bound_is_monotone() {
        for w in [1, 2, 5, 10] {
            for n in 0..20 {
                let (_, a) = fusion_window(n, FusionWindow::Finite(w), 30).unwrap();
                let (_, b) = fusion_window(n + 1, FusionWindow::Finite(w), 30).unwrap();
                assert_eq!(b, a + 1);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::tiny().validate().is_ok());
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.n_top_layers = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.wait_k = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn window_serde() {
        let s = serde_json::to_string(&FusionWindow::Unbounded).unwrap();
        assert_eq!(s, "\"inf\"");
        let w: FusionWindow = serde_json::from_str("5").unwrap();
        assert_eq!(w, FusionWindow::Finite(5));
        assert!(serde_json::from_str::<FusionWindow>("0").is_err());
        assert_eq!("inf".parse::<FusionWindow>().unwrap(), FusionWindow::Unbounded);
    }
}
