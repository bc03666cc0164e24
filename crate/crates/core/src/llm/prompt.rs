use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::taxonomy::EmotionLabel;

use super::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Caption, then "pick top labels that describe the emotion of this person."
    TopLabels,
    /// Caption, then "pick a set of six most likely labels ...".
    SixLabels,
    /// As `SixLabels` with every label glossed by its definition.
    SixLabelsWithDefinitions,
    /// Caption, then "pick the top labels that this person is feeling at the same time."
    TopLabelsFeeling,
    /// Caption-completion form for base/instruct models.
    MistralCompletion,
    /// Image-only request about the person in the red bounding box.
    VlmDirect,
    /// Image-only request with definitions, asking for six labels.
    VlmDirectWithDefinitions,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 7] = [
        PromptVariant::TopLabels,
        PromptVariant::SixLabels,
        PromptVariant::SixLabelsWithDefinitions,
        PromptVariant::TopLabelsFeeling,
        PromptVariant::MistralCompletion,
        PromptVariant::VlmDirect,
        PromptVariant::VlmDirectWithDefinitions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVariant::TopLabels => "top_labels",
            PromptVariant::SixLabels => "six_labels",
            PromptVariant::SixLabelsWithDefinitions => "six_labels_with_definitions",
            PromptVariant::TopLabelsFeeling => "top_labels_feeling",
            PromptVariant::MistralCompletion => "mistral_completion",
            PromptVariant::VlmDirect => "vlm_direct",
            PromptVariant::VlmDirectWithDefinitions => "vlm_direct_with_definitions",
        }
    }

    pub fn uses_caption(self) -> bool {
        !self.uses_image()
    }

    pub fn uses_image(self) -> bool {
        matches!(
            self,
            PromptVariant::VlmDirect | PromptVariant::VlmDirectWithDefinitions
        )
    }

    /// Chat-completions schema, as opposed to plain text completion.
    pub fn is_chat(self) -> bool {
        self != PromptVariant::MistralCompletion
    }

    /// The fixed text that follows the caption.
    pub fn body(self) -> String {
        let plain = label_list(|l| l.canonical_name().to_string());
        let glossed = label_list(EmotionLabel::glossed);
        match self {
            PromptVariant::TopLabels => {
                format!("From {plain}, pick top labels that describe the emotion of this person.")
            }
            PromptVariant::SixLabels => format!(
                "From {plain}, pick a set of six most likely labels that this person is feeling at the same time."
            ),
            PromptVariant::SixLabelsWithDefinitions => format!(
                "From {glossed}, pick a set of six most likely labels that this person is feeling at the same time."
            ),
            PromptVariant::TopLabelsFeeling => format!(
                "From {plain}, pick the top labels that this person is feeling at the same time."
            ),
            PromptVariant::MistralCompletion => format!(
                "From {plain}, the top labels that this person is feeling at the same time are:"
            ),
            PromptVariant::VlmDirect => format!(
                "From {plain}, pick the top labels that the person in the red bounding box is feeling at the same time."
            ),
            PromptVariant::VlmDirectWithDefinitions => format!(
                "From {glossed}, pick a set of six most likely labels that the person in the red bounding box is feeling at the same time."
            ),
        }
    }
}

impl Default for PromptVariant {
    fn default() -> Self {
        PromptVariant::SixLabelsWithDefinitions
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown prompt variant {s:?}"))
    }
}

/// "a, b, ..., y, and z" over the taxonomy in canonical order.
fn label_list(render: impl Fn(EmotionLabel) -> String) -> String {
    let (last, head) = EmotionLabel::ALL.split_last().unwrap();
    let mut out = String::new();
    for label in head {
        out.push_str(&render(*label));
        out.push_str(", ");
    }
    out.push_str("and ");
    out.push_str(&render(*last));
    out
}

/// Full prompt text: `"<caption> <body>"` for caption variants, the body
/// alone for image variants.
pub fn build_prompt(caption: Option<&str>, variant: PromptVariant) -> Result<String, LlmError> {
    if variant.uses_image() {
        return Ok(variant.body());
    }
    let caption = caption
        .map(str::trim)
        .filter(|c| !c.is_empty())
        .ok_or_else(|| LlmError::Config(format!("prompt variant {variant} needs a caption")))?;
    Ok(format!("{caption} {}", variant.body()))
}
