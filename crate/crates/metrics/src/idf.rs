use std::collections::{HashMap, HashSet};

#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    docs: usize,
    idf: HashMap<String, f64>,
}

/// Document frequency of unseen words under add-0.5 smoothing.
const UNSEEN_COUNT: f64 = 0.5;

/// `idf(w) = −ln(df(w) / M)` over documents given as token lists.
pub fn build_idf<S: AsRef<str>>(docs: &[Vec<S>]) -> IdfTable {
    let mut df: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        let distinct: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
        for w in distinct {
            *df.entry(w.to_owned()).or_insert(0) += 1;
        }
    }
    let m = docs.len() as f64;
    let idf = df.into_iter().map(|(w, c)| (w, -(c as f64 / m).ln())).collect();
    IdfTable { docs: docs.len(), idf }
}

impl IdfTable {
    pub fn documents(&self) -> usize {
        self.docs
    }

    /// Unseen words get `−ln(0.5 / (M + 1))`.
    pub fn get(&self, word: &str) -> f64 {
        match self.idf.get(word) {
            Some(&v) => v,
            None => -(UNSEEN_COUNT / (self.docs as f64 + 1.0)).ln(),
        }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.idf.contains_key(word)
    }
}
