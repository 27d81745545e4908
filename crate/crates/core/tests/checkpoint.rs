use auecrl::checkpoint::{self, MAGIC};
use auecrl::error::Error;
use auecrl::knowledge::{ActionUnit, KnowledgeBase, Relevance};
use auecrl::model::{ModelConfig, ModelState};

fn widened(kb: &KnowledgeBase, extra: usize) -> KnowledgeBase {
    let mut aus = kb.aus().to_vec();
    for k in 0..extra {
        aus.push(ActionUnit { name: format!("Extra{k}"), facs: 100 + k as u32 });
    }
    let relevance = (0..kb.n_expressions())
        .map(|e| {
            let mut row: Vec<Relevance> = (0..kb.n_aus()).map(|a| kb.relevance(e, a)).collect();
            row.extend(std::iter::repeat_n(Relevance::None, extra));
            row
        })
        .collect();
    let (pos, neg) = kb.pair_sets();
    KnowledgeBase::new(kb.expressions().to_vec(), aus, relevance, kb.levels(), pos, neg).unwrap()
}

#[test]
fn twelve_au_checkpoint_rejected_under_seventeen_au_config() {
    let kb = KnowledgeBase::builtin();
    let model = ModelState::init(&ModelConfig::default(), &kb.prior(), 1).unwrap();
    let bytes = checkpoint::to_bytes(&model);

    let wide = widened(&kb, 5);
    let config = ModelConfig { n_aus: 17, ..ModelConfig::default() };
    match checkpoint::from_bytes(&bytes, &config, &wide.prior()) {
        Err(Error::Shape(msg)) => assert!(msg.contains('`'), "error should name a tensor: {msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let kb = KnowledgeBase::builtin();
    let mut model = ModelState::init(&ModelConfig::default(), &kb.prior(), 9).unwrap();
    model.set_stage(2);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    checkpoint::save(&model, &a).unwrap();
    let loaded = checkpoint::load(&a, model.config(), &kb.prior()).unwrap();
    assert_eq!(loaded.stage(), 2);
    checkpoint::save(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupted_magic_and_missing_file() {
    let kb = KnowledgeBase::builtin();
    let model = ModelState::init(&ModelConfig::default(), &kb.prior(), 0).unwrap();
    let mut bytes = checkpoint::to_bytes(&model);
    assert!(bytes.starts_with(MAGIC));
    bytes[0] ^= 0xff;
    assert!(matches!(
        checkpoint::from_bytes(&bytes, model.config(), &kb.prior()),
        Err(Error::Format(_))
    ));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        checkpoint::load(dir.path().join("nope.ckpt"), model.config(), &kb.prior()),
        Err(Error::Io(_))
    ));
}
