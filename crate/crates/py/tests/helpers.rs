use std::collections::HashMap;

use serde_json::json;

use narracap::taxonomy::EmotionLabel;
use narracap_py::{frequency_table, label_set, overrides_from_json};

#[test]
fn label_names_resolve_through_aliases() {
    let set = label_set(&["Happiness", "doubt", "PEACE"]).unwrap();
    assert_eq!(
        set.iter().collect::<Vec<_>>(),
        [EmotionLabel::DoubtConfusion, EmotionLabel::Happiness, EmotionLabel::Peace]
    );
    assert!(label_set(&["boredom"]).is_err());
}

#[test]
fn counts_by_name() {
    let counts: HashMap<String, u64> = [("engagement".to_string(), 5), ("Fear".to_string(), 2)].into();
    let table = frequency_table(&counts).unwrap();
    assert_eq!(table.count(EmotionLabel::Engagement), 5);
    assert_eq!(table.count(EmotionLabel::Fear), 2);
    assert_eq!(table.total(), 7);
    assert!(frequency_table(&HashMap::new()).is_err());
}

#[test]
fn keyword_options_map_to_config() {
    let cfg = overrides_from_json(json!({
        "dataset": "a.jsonl",
        "store": "mock",
        "seed": 4,
        "masks": ["full", "no-action"],
        "rule": "top:3",
    }))
    .unwrap()
    .resolve()
    .unwrap();
    assert_eq!(cfg.seed, 4);
    assert_eq!(cfg.masks.len(), 2);
    assert_eq!(cfg.rule.to_string(), "top:3");
    assert!(overrides_from_json(json!({"sede": 4})).is_err());
}
