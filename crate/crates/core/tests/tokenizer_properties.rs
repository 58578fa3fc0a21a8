use std::sync::OnceLock;

use deskformer_core::tokenizer::{train_vocabulary, DEFAULT_SPECIALS, ENDOFTEXT};
use deskformer_core::Vocabulary;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample_docs() -> &'static Vec<String> {
    static DOCS: OnceLock<Vec<String>> = OnceLock::new();
    DOCS.get_or_init(|| {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/corpus.txt");
        let text = std::fs::read_to_string(path).unwrap();
        text.split(&format!("\n{ENDOFTEXT}\n"))
            .take(300)
            .map(str::to_string)
            .collect()
    })
}

fn trained() -> &'static Vocabulary {
    static V: OnceLock<Vocabulary> = OnceLock::new();
    V.get_or_init(|| train_vocabulary(sample_docs().iter().map(|d| d.as_bytes()), 1256, &DEFAULT_SPECIALS).unwrap())
}

/// Vocabularies trained to increasing targets on the same text; greedy training makes
/// each one a prefix of the next.
fn prefixes() -> &'static Vec<Vocabulary> {
    static P: OnceLock<Vec<Vocabulary>> = OnceLock::new();
    P.get_or_init(|| {
        let docs: Vec<&[u8]> = sample_docs().iter().take(40).map(|d| d.as_bytes()).collect();
        [256, 257, 260, 280, 320, 400]
            .iter()
            .map(|&n| train_vocabulary(docs.iter().copied(), n, &[]).unwrap())
            .collect()
    })
}

#[test]
fn thousand_merges_survive_save_and_reload() {
    let v = trained();
    assert_eq!(v.base_vocab_size(), 1256);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ranks.txt");
    v.save_file(&path).unwrap();
    let back = Vocabulary::load_file(&path, &DEFAULT_SPECIALS).unwrap();
    assert_eq!(&back, v);
    for id in 0..v.size() as u32 {
        assert_eq!(back.token_bytes(id), v.token_bytes(id));
    }
}

#[test]
fn prefix_vocabularies_nest() {
    let p = prefixes();
    for w in p.windows(2) {
        for id in 0..w[0].base_vocab_size() as u32 {
            assert_eq!(w[0].token_bytes(id), w[1].token_bytes(id));
        }
    }
}

#[test]
fn chunk_order_does_not_change_merges() {
    let mut docs: Vec<&[u8]> = sample_docs().iter().take(60).map(|d| d.as_bytes()).collect();
    let a = train_vocabulary(docs.iter().copied(), 500, &[]).unwrap();
    docs.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    let b = train_vocabulary(docs.iter().copied(), 500, &[]).unwrap();
    assert_eq!(a, b);
}

fn digit_heavy() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            4 => prop::char::range('0', '9'),
            1 => Just(' '),
            1 => Just('.'),
            1 => Just('-'),
            1 => prop::char::range('a', 'z'),
            1 => prop::char::any(),
        ],
        0..80,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn bytes_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..=1024)) {
        let v = trained();
        let ids = v.encode_bytes(&bytes, false).ids;
        prop_assert!(ids.iter().all(|&id| (id as usize) < v.size()));
        prop_assert_eq!(v.decode(&ids).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn digits_stay_atomic(s in digit_heavy()) {
        let v = trained();
        for id in v.encode(&s, false).ids {
            let t = v.token_bytes(id).unwrap();
            if t.iter().any(u8::is_ascii_digit) {
                prop_assert_eq!(t.len(), 1, "token {:?}", String::from_utf8_lossy(t));
            }
        }
    }

    #[test]
    fn merges_never_add_tokens(start in 0usize..3000, len in 0usize..400) {
        let doc = sample_docs()[start % sample_docs().len()].as_bytes();
        let from = (start * 7) % doc.len().max(1);
        let text = &doc[from..(from + len).min(doc.len())];
        let counts: Vec<usize> = prefixes().iter().map(|v| v.encode_bytes(text, false).ids.len()).collect();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{:?}", counts);
    }
}
