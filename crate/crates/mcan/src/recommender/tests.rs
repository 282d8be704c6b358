use super::*;
use crate::model::{CandidateSet, ModelConfig};
use crate::syngen::{generate, GenConfig};

fn gen_cfg() -> GenConfig {
    GenConfig {
        num_coarse: 3,
        fines_per_coarse: 2,
        items_per_fine: 6,
        num_outfits: 10,
        outfit_len: 3,
        style_dim: 2,
        d_img: 4,
        noise_sigma: 0.2,
        seed: 70,
    }
}

fn model_cfg() -> ModelConfig {
    ModelConfig {
        d: 6,
        d_img: 4,
        d_c: 3,
        hidden_attn: 5,
        hidden_mix_fine: 5,
        hidden_mix_coarse: 5,
        hidden_scorer: 5,
        use_cpl: true,
        sample_k: None,
    }
}

fn rig() -> (Dataset, Mcan, PoolSet) {
    let (dataset, _) = generate(&gen_cfg()).unwrap();
    let model = Mcan::init(model_cfg(), 6, 3, 37).unwrap();
    let pools = PoolSet::build(&dataset).unwrap();
    (dataset, model, pools)
}

fn given(dataset: &Dataset, n: usize) -> TupleSeq {
    TupleSeq::uniform(&dataset.outfits()[0].item_ids[..n], Granularity::Fine).unwrap()
}

// ── recommend_item ─────────────────────────────────────────────────────

#[test]
fn singleton_pool_returns_that_item() {
    let (dataset, model, _) = rig();
    let g = given(&dataset, 2);
    let item = dataset.outfits()[0].item_ids[2];
    let cat = CatRef::fine(dataset.item(item).unwrap().fine_category);
    let pools = PoolSet {
        fine: {
            let mut v = PoolSet::build(&dataset).unwrap().fine;
            v[cat.id] = CandidateSet::from_items(&dataset, cat, &[item]).unwrap();
            v
        },
        coarse: vec![],
    };
    let top = recommend_item(&model, &dataset, &pools, &g, cat, 1).unwrap();
    assert_eq!(top, vec![(item, 1.0)]);
}

#[test]
fn k_beyond_pool_returns_whole_pool_ranked() {
    let (dataset, model, pools) = rig();
    let g = given(&dataset, 2);
    let cat = CatRef::fine(0);
    let pool_len = pools.get(cat).unwrap().len();
    let ranked = recommend_item(&model, &dataset, &pools, &g, cat, pool_len + 100).unwrap();
    assert_eq!(ranked.len(), pool_len);
    for pair in ranked.windows(2) {
        assert!(pair[0].1 >= pair[1].1);
    }
    let total: f64 = ranked.iter().map(|(_, p)| p).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn top_one_matches_exhaustive_scan() {
    let (dataset, model, pools) = rig();
    let g = given(&dataset, 2);
    for fine in 0..dataset.taxonomy().num_fine() {
        let cat = CatRef::fine(fine);
        let top = recommend_item(&model, &dataset, &pools, &g, cat, 1).unwrap()[0];
        // Independent exhaustive scan over the pool's distribution.
        let pool = pools.get(cat).unwrap();
        let prefix = resolve_seq(&dataset, &g).unwrap();
        let dist = model.item_distribution(&prefix, cat, pool).unwrap();
        let mut best = 0usize;
        for i in 1..dist.len() {
            if dist[i] > dist[best]
                || (dist[i] == dist[best] && pool.item_ids[i] < pool.item_ids[best])
            {
                best = i;
            }
        }
        assert_eq!(top.0, pool.item_ids[best]);
        assert_eq!(top.1, dist[best]);
    }
}

#[test]
fn zero_k_is_contract_error() {
    let (dataset, model, pools) = rig();
    let g = given(&dataset, 2);
    assert!(recommend_item(&model, &dataset, &pools, &g, CatRef::fine(0), 0).is_err());
}

// ── recommend_category ─────────────────────────────────────────────────

#[test]
fn single_category_taxonomy_is_certain() {
    let (dataset, _) = generate(&GenConfig {
        num_coarse: 1,
        fines_per_coarse: 2,
        outfit_len: 2,
        ..gen_cfg()
    })
    .unwrap();
    let model = Mcan::init(model_cfg(), 2, 1, 1).unwrap();
    let g = TupleSeq::uniform(&dataset.outfits()[0].item_ids[..1], Granularity::Coarse).unwrap();
    let ranked = recommend_category(&model, &dataset, &g, Granularity::Coarse).unwrap();
    assert_eq!(ranked, vec![(0, 1.0)]);
}

#[test]
fn zero_head_ranks_by_id_order() {
    let (dataset, mut model, _) = rig();
    if let Some(head) = model.params.cpl_fine.as_mut() {
        for layer in head.layers.iter_mut() {
            for v in layer.w.values_mut() {
                *v = 0.0;
            }
            for v in layer.b.values_mut() {
                *v = 0.0;
            }
        }
    }
    let g = given(&dataset, 2);
    let ranked = recommend_category(&model, &dataset, &g, Granularity::Fine).unwrap();
    let ids: Vec<usize> = ranked.iter().map(|&(id, _)| id).collect();
    assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    for (_, p) in ranked {
        assert!((p - 1.0 / 6.0).abs() < 1e-12);
    }
}

#[test]
fn ranking_matches_sorted_distribution() {
    let (dataset, model, _) = rig();
    let g = given(&dataset, 2);
    let ranked = recommend_category(&model, &dataset, &g, Granularity::Fine).unwrap();
    let prefix = resolve_seq(&dataset, &g).unwrap();
    let dist = model.category_distribution(&prefix, Granularity::Fine).unwrap();
    for pair in ranked.windows(2) {
        assert!(pair[0].1 >= pair[1].1);
    }
    for (id, p) in ranked {
        assert_eq!(p, dist[id]);
    }
}

#[test]
fn man_ablation_cannot_recommend_categories() {
    let (dataset, _, _) = rig();
    let model = Mcan::init(
        ModelConfig {
            use_cpl: false,
            ..model_cfg()
        },
        6,
        3,
        2,
    )
    .unwrap();
    let g = given(&dataset, 2);
    let err = recommend_category(&model, &dataset, &g, Granularity::Fine);
    assert!(matches!(err, Err(RecError::Model(ModelError::CplDisabled))));
}

// ── complete_outfit ────────────────────────────────────────────────────

#[test]
fn one_given_category_appends_top_item() {
    let (dataset, model, pools) = rig();
    let g = given(&dataset, 2);
    let cat = CatRef::fine(5);
    let query = Query {
        given: g.clone(),
        plan: vec![PlanStep {
            category: Some(5),
            granularity: Granularity::Fine,
        }],
        max_len: 3,
    };
    let completion = complete_outfit(&model, &dataset, &pools, &query).unwrap();
    let top = recommend_item(&model, &dataset, &pools, &g, cat, 1).unwrap()[0];
    assert_eq!(completion.seq.len(), 3);
    assert_eq!(completion.seq.entries()[2], (top.0, Granularity::Fine));
    assert_eq!(completion.steps.len(), 1);
    assert_eq!(completion.steps[0].item, top.0);
    assert_eq!(completion.steps[0].category_prob, None);
}

#[test]
fn all_given_plan_equals_repeated_recommendation() {
    let (dataset, model, pools) = rig();
    let g = given(&dataset, 1);
    let query = Query {
        given: g.clone(),
        plan: vec![
            PlanStep {
                category: Some(2),
                granularity: Granularity::Fine,
            },
            PlanStep {
                category: Some(4),
                granularity: Granularity::Fine,
            },
        ],
        max_len: 3,
    };
    let completion = complete_outfit(&model, &dataset, &pools, &query).unwrap();

    // Compose by hand.
    let mut seq = g;
    let first = recommend_item(&model, &dataset, &pools, &seq, CatRef::fine(2), 1).unwrap()[0];
    seq.push(first.0, Granularity::Fine);
    let second = recommend_item(&model, &dataset, &pools, &seq, CatRef::fine(4), 1).unwrap()[0];
    seq.push(second.0, Granularity::Fine);
    assert_eq!(completion.seq, seq);
}

#[test]
fn completion_is_deterministic() {
    let (dataset, model, pools) = rig();
    let query = Query {
        given: given(&dataset, 1),
        plan: vec![
            PlanStep {
                category: None,
                granularity: Granularity::Fine,
            },
            PlanStep {
                category: None,
                granularity: Granularity::Coarse,
            },
        ],
        max_len: 4,
    };
    let a = complete_outfit(&model, &dataset, &pools, &query).unwrap();
    let b = complete_outfit(&model, &dataset, &pools, &query).unwrap();
    assert_eq!(a, b);
}

#[test]
fn given_category_steps_are_controllable() {
    let (dataset, model, pools) = rig();
    let query = Query {
        given: given(&dataset, 1),
        plan: vec![
            PlanStep {
                category: Some(3),
                granularity: Granularity::Fine,
            },
            PlanStep {
                category: Some(1),
                granularity: Granularity::Coarse,
            },
        ],
        max_len: 4,
    };
    let completion = complete_outfit(&model, &dataset, &pools, &query).unwrap();
    let fine_item = completion.steps[0].item;
    assert_eq!(dataset.item(fine_item).unwrap().fine_category, 3);
    let coarse_item = completion.steps[1].item;
    assert_eq!(
        dataset.category_of(coarse_item, Granularity::Coarse).unwrap(),
        1
    );
}

#[test]
fn wildcards_skip_used_categories() {
    let (dataset, model, pools) = rig();
    // Fill the outfit so only one fine category remains.
    let outfit = &dataset.outfits()[0];
    let used: Vec<usize> = outfit
        .item_ids
        .iter()
        .map(|&i| dataset.item(i).unwrap().fine_category)
        .collect();
    let query = Query {
        given: TupleSeq::uniform(&outfit.item_ids, Granularity::Fine).unwrap(),
        plan: vec![PlanStep {
            category: None,
            granularity: Granularity::Fine,
        }],
        max_len: 4,
    };
    let completion = complete_outfit(&model, &dataset, &pools, &query).unwrap();
    let picked = completion.steps[0].category.id;
    assert!(!used.contains(&picked));
    assert!(completion.steps[0].category_prob.is_some());
}

#[test]
fn exhausted_wildcard_is_completion_error() {
    // Single coarse category, already present in the given outfit.
    let (dataset, _) = generate(&GenConfig {
        num_coarse: 1,
        fines_per_coarse: 2,
        outfit_len: 2,
        ..gen_cfg()
    })
    .unwrap();
    let model = Mcan::init(model_cfg(), 2, 1, 3).unwrap();
    let pools = PoolSet::build(&dataset).unwrap();
    let query = Query {
        given: TupleSeq::uniform(&dataset.outfits()[0].item_ids[..1], Granularity::Coarse).unwrap(),
        plan: vec![PlanStep {
            category: None,
            granularity: Granularity::Coarse,
        }],
        max_len: 2,
    };
    let err = complete_outfit(&model, &dataset, &pools, &query).unwrap_err();
    assert!(matches!(err, RecError::CategoriesExhausted { .. }));
}

#[test]
fn mixed_granularity_plan_completes() {
    let (dataset, model, pools) = rig();
    let query = Query {
        given: given(&dataset, 1), // fine given
        plan: vec![
            PlanStep {
                category: None,
                granularity: Granularity::Coarse,
            },
            PlanStep {
                category: Some(4),
                granularity: Granularity::Fine,
            },
        ],
        max_len: 4,
    };
    let completion = complete_outfit(&model, &dataset, &pools, &query).unwrap();
    assert_eq!(completion.seq.len(), 3);
    assert_eq!(completion.seq.entries()[1].1, Granularity::Coarse);
    assert_eq!(completion.seq.entries()[2].1, Granularity::Fine);
}

#[test]
fn invalid_queries_are_rejected() {
    let (dataset, _, _) = rig();
    let no_plan = Query {
        given: given(&dataset, 1),
        plan: vec![],
        max_len: 5,
    };
    assert!(no_plan.validate().is_err());
    let too_short = Query {
        given: given(&dataset, 2),
        plan: vec![PlanStep {
            category: Some(0),
            granularity: Granularity::Fine,
        }],
        max_len: 2,
    };
    assert!(too_short.validate().is_err());
}

// ── Text formats ───────────────────────────────────────────────────────

#[test]
fn query_document_round_trips() {
    let text = "Q 4\nG 12 fine\nS 3 fine\nS * coarse\n";
    let q = query_from_str(text).unwrap();
    assert_eq!(q.max_len, 4);
    assert_eq!(q.given.entries(), &[(12, Granularity::Fine)]);
    assert_eq!(
        q.plan,
        vec![
            PlanStep {
                category: Some(3),
                granularity: Granularity::Fine
            },
            PlanStep {
                category: None,
                granularity: Granularity::Coarse
            },
        ]
    );
}

#[test]
fn query_without_max_len_defaults_to_exact_fit() {
    let q = query_from_str("G 5 coarse\nS * fine\n").unwrap();
    assert_eq!(q.max_len, 2);
}

#[test]
fn malformed_query_reports_line() {
    let err = query_from_str("Q 4\nG x fine\n").unwrap_err();
    assert!(matches!(err, RecError::Parse { line: 2, .. }), "{err}");
}

#[test]
fn completion_serialization_lists_tuples_then_steps() {
    let (dataset, model, pools) = rig();
    let query = Query {
        given: given(&dataset, 2),
        plan: vec![PlanStep {
            category: Some(5),
            granularity: Granularity::Fine,
        }],
        max_len: 3,
    };
    let completion = complete_outfit(&model, &dataset, &pools, &query).unwrap();
    let text = completion_to_string(&completion);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4); // 3 tuples + 1 step
    assert!(lines[0].starts_with("T "));
    assert!(lines[3].starts_with("P 0 fine 5 "));
    assert!(lines[3].ends_with(" -"));
}
