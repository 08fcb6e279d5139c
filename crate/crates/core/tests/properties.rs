use mtforge_core::augment::{apply_noise, is_protected, strip_tags, tag_sentence, NoiseSpec, TagSpec};
use mtforge_core::corpus::{Domain, Origin, SentencePair};
use mtforge_core::evalsel::{bleu, objective, select_ensemble};
use mtforge_core::filter::{run_filters, FilterRules};
use mtforge_core::model::Vocab;
use mtforge_core::subword::{bpe_apply, bpe_learn, bpe_undo, default_protected};
use mtforge_core::text_norm::{is_case_marker, mark_case, normalize_punct, unmark_case, Lang, RawSentence, TokenSentence};
use proptest::prelude::*;

fn en(tokens: Vec<String>) -> TokenSentence {
    TokenSentence::new(tokens, Lang::En)
}

fn word() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9][a-zA-Z0-9\\-]{0,7}"
}

fn sentence(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(word(), 0..max)
}

fn zh_word() -> impl Strategy<Value = String> {
    "[药物治疗每日剂量]{1,4}"
}

proptest! {
    #[test]
    fn case_marking_round_trips(tokens in sentence(12)) {
        let s = en(tokens);
        prop_assert_eq!(unmark_case(&mark_case(&s).unwrap()).unwrap(), s);
    }

    #[test]
    fn lower_title_and_upper_words_are_lowercased(words in prop::collection::vec(("[a-z]{2,8}", 0u8..3), 0..12)) {
        let tokens: Vec<String> = words
            .into_iter()
            .map(|(w, form)| match form {
                0 => w,
                1 => w[..1].to_uppercase() + &w[1..],
                _ => w.to_uppercase(),
            })
            .collect();
        let marked = mark_case(&en(tokens)).unwrap();
        prop_assert!(marked.tokens.iter().all(|t| is_case_marker(t) || t.to_lowercase() == *t));
    }

    #[test]
    fn punct_normalization_is_idempotent(text in "[ a-z，。！？：；（）“”、0-9\t]{0,30}") {
        let once = normalize_punct(&RawSentence::new(text, Lang::Zh));
        prop_assert_eq!(normalize_punct(&once), once.clone());
    }

    #[test]
    fn bpe_round_trips(corpus in prop::collection::vec(prop::collection::vec(word(), 1..6), 1..20), probe in sentence(10), ops in 1usize..60) {
        let corpus: Vec<TokenSentence> = corpus.into_iter().map(en).collect();
        let model = bpe_learn(&corpus, ops, &default_protected()).unwrap();
        prop_assert!(model.merges().len() <= ops);
        let s = en(probe);
        prop_assert_eq!(bpe_undo(&bpe_apply(&s, &model)).unwrap(), s);
    }

    #[test]
    fn tags_round_trip(tokens in prop::collection::vec(zh_word(), 0..10), o in 0usize..Origin::ALL.len(), d in 0usize..Domain::ALL.len()) {
        let s = TokenSentence::new(tokens, Lang::Zh);
        let tags = TagSpec { origin: Origin::ALL[o], domain: Domain::ALL[d] };
        let tagged = tag_sentence(&s, tags).unwrap();
        prop_assert_eq!(tagged.len(), s.len() + 2);
        prop_assert!(tag_sentence(&tagged, tags).is_err());
        prop_assert_eq!(strip_tags(&tagged), (Some(tags), s));
    }

    #[test]
    fn zero_noise_is_identity(tokens in sentence(15), seed in any::<u64>()) {
        let s = en(tokens);
        let spec = NoiseSpec { unk_rate: 0.0, delete_rate: 0.0, swap_rate: 0.0, swap_window: 3, seed };
        prop_assert_eq!(apply_noise(&s, &spec), s);
    }

    #[test]
    fn noise_keeps_protected_tokens_in_place(tokens in sentence(15), seed in any::<u64>(), rate in 0.0f64..1.0) {
        let mut toks = vec!["<BT>".to_string(), "<BIO>".to_string()];
        toks.extend(tokens);
        let s = en(toks);
        let spec = NoiseSpec { unk_rate: rate, delete_rate: rate, swap_rate: rate, swap_window: 3, seed };
        let out = apply_noise(&s, &spec);
        prop_assert_eq!(&out.tokens[..2], &s.tokens[..2]);
        prop_assert!(out.len() <= s.len());
        prop_assert!(s.len() == 2 || out.tokens.iter().any(|t| !is_protected(t)));
        prop_assert_eq!(apply_noise(&s, &spec), out);
    }

    #[test]
    fn bleu_is_bounded(pairs in prop::collection::vec((sentence(10), sentence(10)), 1..8)) {
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().map(|(h, r)| (en(h), en(r))).unzip();
        let b = bleu(&hyps, &refs).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b), "{}", b);
    }

    #[test]
    fn bleu_of_identity_is_100(refs in prop::collection::vec(prop::collection::vec(word(), 4..10), 1..6)) {
        let refs: Vec<TokenSentence> = refs.into_iter().map(en).collect();
        prop_assert!((bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn selection_is_a_valid_subset(
        (n, k, dev, matrix) in (2usize..9).prop_flat_map(|n| (
            Just(n),
            1..=n,
            prop::collection::vec(0.0f64..100.0, n),
            prop::collection::vec(prop::collection::vec(0.0f64..100.0, n), n),
        )),
        lambda in 0.0f64..1.0,
    ) {
        let chosen = select_ensemble(&dev, &matrix, k, lambda).unwrap();
        prop_assert_eq!(chosen.len(), k);
        let mut sorted = chosen.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(chosen.iter().all(|&i| i < n));
        let best = (0..n).fold(0, |b, i| if dev[i] > dev[b] { i } else { b });
        prop_assert_eq!(chosen[0], best);
        prop_assert!(objective(&chosen, &dev, &matrix, lambda).is_finite());
    }

    #[test]
    fn zero_lambda_selection_is_top_k(dev in prop::collection::vec(0.0f64..100.0, 2..9), k in 1usize..9) {
        let n = dev.len();
        let k = k.min(n);
        let matrix = vec![vec![50.0; n]; n];
        let chosen = select_ensemble(&dev, &matrix, k, 0.0).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(a.cmp(&b)));
        let mut got = chosen.clone();
        got.sort_by(|&a, &b| dev[b].total_cmp(&dev[a]).then(a.cmp(&b)));
        prop_assert_eq!(got, order[..k].to_vec());
    }

    #[test]
    fn predicate_filters_are_idempotent(
        rows in prop::collection::vec((prop::collection::vec(zh_word(), 0..8), sentence(8)), 0..30),
    ) {
        let corpus: Vec<SentencePair> = rows
            .into_iter()
            .map(|(s, t)| SentencePair::new(s, t, Origin::Real, Domain::Bio))
            .collect();
        let rules = FilterRules::default().without_align();
        let once = run_filters(&corpus, &rules, None).unwrap();
        prop_assert_eq!(once.report.kept + once.report.dropped(), corpus.len());
        let twice = run_filters(&once.kept, &rules, None).unwrap();
        prop_assert_eq!(twice.kept, once.kept);
    }

    #[test]
    fn vocab_round_trips_known_tokens(tokens in sentence(20)) {
        let v = Vocab::build(&tokens);
        prop_assert_eq!(v.decode(&v.encode(&tokens)), tokens);
    }
}
