//! Program-language checks: parser/serializer round trips, the worked
//! example, the error taxonomy, and feasibility-mask soundness verified two
//! independent ways (a counting recurrence and brute-force enumeration).

use modnet_core::lang::{
    self, arity, exact_match, feasible_next, parse_prefix, serialize, to_text, validate_prefix,
    DecodeState, ParseError, ProgramTree, FIRST_OPERATOR, MAX_PROGRAM_LEN, TOK_AND, TOK_END,
    TOK_SCENE, VOCAB_SIZE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn operators() -> Vec<u8> {
    (0..VOCAB_SIZE as u8).filter(|&t| arity(t).is_some()).collect()
}

/// Independent oracle: number of complete programs of exactly n tokens.
/// One nullary token, ten unary tokens, one binary token gives
/// f(1) = 1, f(n) = 10 f(n-1) + sum_{i+j=n-1} f(i) f(j).
fn tree_counts(up_to: usize) -> Vec<u64> {
    let mut f = vec![0u64; up_to + 1];
    f[1] = 1;
    for n in 2..=up_to {
        let mut total = 10 * f[n - 1];
        for i in 1..n - 1 {
            total += f[i] * f[n - 1 - i];
        }
        f[n] = total;
    }
    f
}

#[test]
fn vocabulary_layout() {
    let v = lang::vocabulary();
    assert_eq!(v.len(), 16);
    for (i, t) in v.iter().enumerate() {
        assert_eq!(t.id as usize, i);
    }
    // 4 specials, 1 nullary, 10 unary, 1 binary.
    assert_eq!(v.iter().filter(|t| t.arity.is_none()).count(), 4);
    assert_eq!(v.iter().filter(|t| t.arity == Some(0)).count(), 1);
    assert_eq!(v.iter().filter(|t| t.arity == Some(1)).count(), 10);
    assert_eq!(v.iter().filter(|t| t.arity == Some(2)).count(), 1);
    assert_eq!(lang::token_by_name("transform[left_of]"), Some(lang::TOK_LEFT_OF));
    assert_eq!(lang::token_name(TOK_SCENE), "scene");
}

#[test]
fn worked_example_round_trip() {
    let text = "and color[green] scene transform[left_of] shape[square] scene";
    let seq = lang::from_text(text).unwrap();
    assert_eq!(seq, vec![5, 7, 4, 14, 11, 4]);
    let tree = parse_prefix(&seq).unwrap();
    assert_eq!(tree.token, TOK_AND);
    assert_eq!(tree.children.len(), 2);
    assert_eq!(tree.children[0].token, lang::TOK_COLOR_GREEN);
    assert_eq!(tree.children[0].children[0].token, TOK_SCENE);
    assert_eq!(tree.children[1].token, lang::TOK_LEFT_OF);
    assert_eq!(tree.children[1].children[0].token, lang::TOK_SHAPE_SQUARE);
    assert_eq!(serialize(&tree), seq);
    assert_eq!(to_text(&seq), text);
    assert_eq!(tree.len(), 6);
}

#[test]
fn parse_error_taxonomy() {
    assert_eq!(parse_prefix(&[]), Err(ParseError::EmptySequence));
    // Arity underflow: `and scene` still owes one operand.
    assert_eq!(parse_prefix(&[TOK_AND, TOK_SCENE]), Err(ParseError::Underflow { missing: 1 }));
    assert_eq!(parse_prefix(&[TOK_AND]), Err(ParseError::Underflow { missing: 2 }));
    // Trailing tokens after a complete tree.
    assert_eq!(
        parse_prefix(&[TOK_SCENE, TOK_SCENE]),
        Err(ParseError::TrailingTokens { at: 1 })
    );
    // Specials are not operators.
    assert_eq!(
        parse_prefix(&[TOK_AND, TOK_END, TOK_SCENE]),
        Err(ParseError::SpecialToken { at: 1, token: TOK_END })
    );
    assert_eq!(parse_prefix(&[99]), Err(ParseError::UnknownToken { at: 0, token: 99 }));
    let long = vec![TOK_SCENE; MAX_PROGRAM_LEN + 1];
    assert_eq!(parse_prefix(&long), Err(ParseError::TooLong { len: 17 }));
    // Cap boundary: a 16-token program is accepted.
    let mut seq = vec![lang::TOK_COLOR_RED; MAX_PROGRAM_LEN - 1];
    seq.push(TOK_SCENE);
    assert!(validate_prefix(&seq));
}

fn random_tree(rng: &mut ChaCha8Rng, budget: usize) -> ProgramTree {
    // Uniform-ish random tree that fits in `budget` tokens (budget >= 1).
    let ops = operators();
    loop {
        let tok = ops[rng.gen_range(0..ops.len())];
        let a = arity(tok).unwrap() as usize;
        if a == 0 {
            return ProgramTree::leaf(tok);
        }
        if budget < 1 + a {
            continue;
        }
        let mut children = Vec::with_capacity(a);
        let mut left = budget - 1;
        for i in 0..a {
            let reserve = a - 1 - i;
            let child_budget = if reserve == 0 { left } else { rng.gen_range(1..=left - reserve) };
            children.push(random_tree(rng, child_budget));
            left -= children.last().unwrap().len();
        }
        return ProgramTree::node(tok, children);
    }
}

#[test]
fn round_trip_10k_random_trees() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..10_000 {
        let tree = random_tree(&mut rng, MAX_PROGRAM_LEN);
        let seq = serialize(&tree);
        assert!(seq.len() <= MAX_PROGRAM_LEN);
        let back = parse_prefix(&seq).expect("serialized tree must parse");
        assert_eq!(back, tree);
        assert_eq!(serialize(&back), seq);
        // Text round trip.
        let text = to_text(&seq);
        assert_eq!(lang::from_text(&text).unwrap(), seq);
        assert!(exact_match(&seq, &serialize(&back)));
    }
}

#[test]
fn counter_matches_parser_on_random_sequences() {
    // For arbitrary operator sequences: the pending counter reaches zero at
    // position k iff the first k tokens parse, and mid-sequence feasibility
    // agrees with parse outcomes.
    let ops = operators();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..20_000 {
        let len = rng.gen_range(1..=10);
        let seq: Vec<u8> = (0..len).map(|_| ops[rng.gen_range(0..ops.len())]).collect();
        let mut p: i64 = 1;
        let mut first_zero = None;
        for (k, &tok) in seq.iter().enumerate() {
            p = p - 1 + arity(tok).unwrap() as i64;
            if p == 0 {
                first_zero = Some(k + 1);
                break;
            }
        }
        match first_zero {
            Some(k) => {
                assert!(validate_prefix(&seq[..k]));
                if k < seq.len() {
                    assert_eq!(parse_prefix(&seq), Err(ParseError::TrailingTokens { at: k }));
                }
            }
            None => {
                assert!(matches!(parse_prefix(&seq), Err(ParseError::Underflow { .. })));
            }
        }
    }
}

/// Every sequence reachable through feasibility masks, counted per length.
/// Recursion visits only mask-allowed tokens, so these counts certify the
/// masks exhaustively for max_len <= 8.
fn count_masked(state: DecodeState, max_len: usize, counts: &mut [u64]) {
    if state.complete() {
        counts[state.len()] += 1;
        return;
    }
    let mask = state.feasible_mask(max_len);
    for t in FIRST_OPERATOR..VOCAB_SIZE as u8 {
        if mask[t as usize] {
            let mut next = state;
            next.step(t);
            count_masked(next, max_len, counts);
        }
    }
}

#[test]
fn feasibility_masks_exhaustive_to_len_8() {
    let max_len = 8;
    let mut counts = vec![0u64; max_len + 1];
    count_masked(DecodeState::new(), max_len, &mut counts);
    let f = tree_counts(max_len);
    assert_eq!(&counts[1..], &f[1..], "masked enumeration vs counting recurrence");
    assert_eq!(
        f[1..].iter().sum::<u64>(),
        13_445_199,
        "total programs of length <= 8"
    );
    assert_eq!(&f[1..5], &[1, 10, 101, 1030]);
}

#[test]
fn feasibility_masks_match_brute_force_to_len_5() {
    // Independent route: enumerate ALL token strings up to length 5 over the
    // full 16-id alphabet, keep the ones that parse, and compare against the
    // mask-guided enumeration as sets.
    let max_len = 5;
    let mut brute: Vec<Vec<u8>> = Vec::new();
    let mut stack: Vec<Vec<u8>> = vec![vec![]];
    while let Some(prefix) = stack.pop() {
        for t in 0..VOCAB_SIZE as u8 {
            let mut s = prefix.clone();
            s.push(t);
            if validate_prefix(&s) {
                brute.push(s.clone());
            }
            if s.len() < max_len {
                stack.push(s);
            }
        }
    }
    brute.sort();
    brute.dedup();

    let mut masked: Vec<Vec<u8>> = Vec::new();
    fn collect(prefix: &mut Vec<u8>, state: DecodeState, max_len: usize, out: &mut Vec<Vec<u8>>) {
        if state.complete() {
            out.push(prefix.clone());
            return;
        }
        let mask = state.feasible_mask(max_len);
        for t in 0..VOCAB_SIZE as u8 {
            if t == TOK_END {
                continue;
            }
            if mask[t as usize] {
                let mut next = state;
                next.step(t);
                prefix.push(t);
                collect(prefix, next, max_len, out);
                prefix.pop();
            }
        }
    }
    collect(&mut Vec::new(), DecodeState::new(), max_len, &mut masked);
    masked.sort();

    assert_eq!(brute, masked);
    let f = tree_counts(max_len);
    assert_eq!(masked.len() as u64, f[1..].iter().sum::<u64>());
}

#[test]
fn feasible_next_end_token_and_dead_prefixes() {
    // After a complete program only <END> is feasible.
    let mask = feasible_next(&[TOK_SCENE], MAX_PROGRAM_LEN).unwrap();
    assert!(mask[TOK_END as usize]);
    for t in 0..VOCAB_SIZE as u8 {
        if t != TOK_END {
            assert!(!mask[t as usize], "token {t} after completion");
        }
    }
    // Mid-program <END> is infeasible, specials never feasible.
    let mask = feasible_next(&[TOK_AND], MAX_PROGRAM_LEN).unwrap();
    assert!(!mask[TOK_END as usize]);
    assert!(!mask[lang::TOK_START as usize]);
    assert!(!mask[lang::TOK_NULL as usize]);
    assert!(!mask[lang::TOK_UNK as usize]);
    assert!(mask[TOK_SCENE as usize]);
    // Length pressure: with max_len 3, after `and` a second `and` would need
    // 5 tokens total, so it is masked while scene stays open.
    let mask = feasible_next(&[TOK_AND], 3).unwrap();
    assert!(!mask[TOK_AND as usize]);
    assert!(!mask[lang::TOK_COLOR_RED as usize]);
    assert!(mask[TOK_SCENE as usize]);
    // A prefix that is already dead (special inside) reports None.
    assert!(feasible_next(&[TOK_END], MAX_PROGRAM_LEN).is_none());
    assert!(feasible_next(&[TOK_SCENE, TOK_SCENE], MAX_PROGRAM_LEN).is_none());
}

#[test]
fn masked_sequences_always_complete_within_cap() {
    // Greedy worst case: always pick the highest-arity feasible token. The
    // mask must still force completion by max_len.
    for max_len in 1..=MAX_PROGRAM_LEN {
        let mut st = DecodeState::new();
        let mut seq = Vec::new();
        while !st.complete() {
            let mask = st.feasible_mask(max_len);
            let pick = (FIRST_OPERATOR..VOCAB_SIZE as u8)
                .filter(|&t| mask[t as usize])
                .max_by_key(|&t| arity(t).unwrap());
            let Some(t) = pick else {
                panic!("no feasible token at len {} under cap {}", seq.len(), max_len);
            };
            st.step(t);
            seq.push(t);
        }
        assert!(seq.len() <= max_len);
        assert!(validate_prefix(&seq));
    }
}
