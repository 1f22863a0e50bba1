use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inputs {
    pub vision: bool,
    pub speech: bool,
    pub text: bool,
}

impl Inputs {
    /// Parses `text`, `speech`, `vision+speech`, ... (`+` or `,` separated).
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = Inputs::default();
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            let slot = match part {
                "vision" | "v" => &mut out.vision,
                "speech" | "s" => &mut out.speech,
                "text" | "t" => &mut out.text,
                other => return Err(OmniError::Config(format!("unknown input modality {other:?}"))),
            };
            if *slot {
                return Err(OmniError::Config(format!("input modality {part:?} given twice")));
            }
            *slot = true;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Output {
    Text,
    Speech,
}

impl FromStr for Output {
    type Err = OmniError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "t" => Ok(Output::Text),
            "speech" | "s" => Ok(Output::Speech),
            other => Err(OmniError::Config(format!("unknown output modality {other:?}"))),
        }
    }
}

impl fmt::Display for Output {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Output::Text => "text",
            Output::Speech => "speech",
        })
    }
}

/// Which context segments a session feeds and whether the top stack runs.
/// Context order is always `[vision : speech : text : bos]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Route {
    pub vision: bool,
    pub speech_in: bool,
    pub text_in: bool,
    pub speech_out: bool,
}

/// Every combination with a speech or text query is served; vision alone is not
/// a query.
pub fn modality_route(inputs: Inputs, output: Output) -> Result<Route> {
    if !inputs.speech && !inputs.text {
        return Err(OmniError::Config(format!(
            "unsupported modality combination {inputs:?} -> {output}: a speech or text query is required"
        )));
    }
    Ok(Route {
        vision: inputs.vision,
        speech_in: inputs.speech,
        text_in: inputs.text,
        speech_out: output == Output::Speech,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supported_combinations() {
        let cases = [
            ("text", Output::Text, false),
            ("speech", Output::Text, false),
            ("speech", Output::Speech, true),
            ("vision+text", Output::Text, false),
            ("vision+speech", Output::Text, false),
            ("vision+speech", Output::Speech, true),
        ];
        for (i, o, top) in cases {
            let r = modality_route(Inputs::parse(i).unwrap(), o).unwrap();
            assert_eq!(r.speech_out, top, "{i}");
        }
        let r = modality_route(Inputs::parse("speech").unwrap(), Output::Text).unwrap();
        assert!(r.speech_in && !r.text_in && !r.vision && !r.speech_out);
    }

    #[test]
    fn rejects_vision_only_and_junk() {
        assert!(modality_route(Inputs::parse("vision").unwrap(), Output::Text).is_err());
        assert!(modality_route(Inputs::default(), Output::Speech).is_err());
        assert!(Inputs::parse("smell").is_err());
        assert!(Inputs::parse("text+text").is_err());
        assert!("audio".parse::<Output>().is_err());
    }
}
