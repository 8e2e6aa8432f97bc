mod common;

use socialvec::inference::{
    attr_train, group_ratio, AttributeClassifier, GroupCondition, GroupFitConfig, HeadConfig, ModelFingerprint,
};
use socialvec::params::ModelTables;
use socialvec::synth::{self, AttributeSpec, Predicate, SynthConfig};
use socialvec::trainer::train;

/// Community c0 carries `tag=yes` with probability 0.75, community c1 with
/// 0.25, so the planted ratio is 3.
#[test]
fn planted_three_fold_ratio() {
    let cfg = SynthConfig {
        attributes: vec![
            AttributeSpec::numbered("member", "c", 2, 0.0),
            AttributeSpec {
                name: "tag".into(),
                values: vec!["yes".into(), "no".into()],
                noise: 0.25,
            },
        ],
        seed: 1,
        ..SynthConfig::default()
    };
    let data = synth::generate(&cfg).unwrap();
    let emp = |c: &str| {
        synth::empirical_conditional(&data, &[Predicate::new("member", c)], &[Predicate::new("tag", "yes")]).unwrap()
    };
    let planted = emp("c0") / emp("c1");
    assert!((2.0..=4.5).contains(&planted), "empirical ratio {planted}");

    let (params, _) = train(&data.corpus, &common::desk_train(1)).unwrap();
    let fp = ModelFingerprint::of(&params, &ModelTables::from_corpus(&data.corpus));
    let head = |name: &str| -> AttributeClassifier {
        let a = data.attribute(name).unwrap();
        let examples: Vec<(usize, usize)> = a.labels.iter().copied().enumerate().collect();
        attr_train(
            &params,
            fp.clone(),
            name,
            a.values.clone(),
            &examples,
            &HeadConfig::default(),
            None,
        )
        .unwrap()
        .classifier
    };
    let (member, tag) = (head("member"), head("tag"));
    let yes = tag.label_index("yes").unwrap();
    let given = |c: &str| [GroupCondition::new(&member, member.label_index(c).unwrap()).unwrap()];
    let target = [GroupCondition::new(&tag, yes).unwrap()];
    let (g0, g1) = (given("c0"), given("c1"));
    let ratio = group_ratio(
        (&g0, &target),
        (&g1, &target),
        &params.mean_user(),
        &GroupFitConfig::default(),
    )
    .unwrap();
    assert!((2.0..=4.5).contains(&ratio), "model ratio {ratio}, empirical {planted}");
}
