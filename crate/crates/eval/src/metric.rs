use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Rouge1,
    Rouge2,
    RougeL,
    RougeW,
    RougeS,
    RougeSu,
    BertScore,
    MoverScore,
    /// Word-level transport distance.
    Wmd,
    /// Sentence-level embedding distance.
    Smd,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Rouge1,
        Metric::Rouge2,
        Metric::RougeL,
        Metric::RougeW,
        Metric::RougeS,
        Metric::RougeSu,
        Metric::BertScore,
        Metric::MoverScore,
        Metric::Wmd,
        Metric::Smd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rouge1 => "rouge-1",
            Metric::Rouge2 => "rouge-2",
            Metric::RougeL => "rouge-l",
            Metric::RougeW => "rouge-w",
            Metric::RougeS => "rouge-s",
            Metric::RougeSu => "rouge-su",
            Metric::BertScore => "bertscore",
            Metric::MoverScore => "moverscore",
            Metric::Wmd => "wmd",
            Metric::Smd => "smd",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s.trim().to_ascii_lowercase())
    }

    pub fn needs_embeddings(self) -> bool {
        matches!(self, Metric::BertScore | Metric::MoverScore | Metric::Wmd | Metric::Smd)
    }

    /// Distances are better when smaller.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Wmd | Metric::Smd)
    }

    /// Bumped whenever the metric's output changes for the same inputs.
    pub fn version(self) -> u32 {
        1
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Comma-separated names, `all` for every metric. Order is kept and
/// repeats are dropped.
pub fn parse_metric_list(list: &[String]) -> Result<Vec<Metric>, String> {
    let mut out = Vec::new();
    for name in list.iter().flat_map(|s| s.split(',')).filter(|s| !s.trim().is_empty()) {
        let ms: Vec<Metric> = if name.trim() == "all" {
            Metric::ALL.to_vec()
        } else {
            vec![Metric::parse(name).ok_or_else(|| format!("unknown metric {name:?}"))?]
        };
        for m in ms {
            if !out.contains(&m) {
                out.push(m);
            }
        }
    }
    if out.is_empty() {
        return Err("no metrics selected".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for m in Metric::ALL {
            assert_eq!(Metric::parse(m.name()), Some(m));
        }
        assert_eq!(Metric::parse(" ROUGE-L "), Some(Metric::RougeL));
        assert_eq!(Metric::parse("bleu"), None);
    }

    #[test]
    fn list_parsing() {
        let l = parse_metric_list(&["rouge-l,bertscore".into(), "rouge-l".into()]).unwrap();
        assert_eq!(l, vec![Metric::RougeL, Metric::BertScore]);
        assert_eq!(parse_metric_list(&["all".into()]).unwrap().len(), 10);
        assert!(parse_metric_list(&["rouge-x".into()]).is_err());
        assert!(parse_metric_list(&[]).is_err());
    }
}
