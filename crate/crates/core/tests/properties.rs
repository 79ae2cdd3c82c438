use luckchain::digest::Digest;
use luckchain::ledger::{valid, Block, BlockHeader, Chain, Linked, Transaction};
use luckchain::luckstats::{mc_persistence, mgf_max_uniform, PersistenceQuery};
use luckchain::primitives::{luck_measurement, LuckProof};
use luckchain::scenario::Scenario;
use luckchain::simnet::run;
use luckchain::superblock::{merge_luckiest, superblock_luck};
use luckchain::tee::{Cpu, SigningOracle, SimClock, VendorRegistry};
use proptest::prelude::*;

struct Cpus {
    registry: VendorRegistry,
    oracles: Vec<SigningOracle>,
}

fn cpus(n: u64) -> Cpus {
    let mut registry = VendorRegistry::new();
    let clock = SimClock::new();
    let oracles = (0..n)
        .map(|i| {
            let cpu = Cpu::create(17, i, &mut registry, &clock).unwrap();
            cpu.mark_compromised();
            cpu.signing_oracle().unwrap()
        })
        .collect();
    Cpus { registry, oracles }
}

fn block(oracle: &SigningOracle, parent: Digest, tag: &str, l: f64, basename: Option<&[u8]>) -> Block {
    let txs = vec![Transaction::new(tag.as_bytes().to_vec())];
    let header = BlockHeader::new(parent, &txs);
    let att = oracle.attest(luck_measurement(), &LuckProof::payload(&header.digest(), l), basename);
    Block::new(parent, txs, LuckProof::from_attestation(att).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn chain_luck_is_sum_and_snapshot_roundtrips(ls in proptest::collection::vec(0.0f64..1.0, 0..6)) {
        let c = cpus(1);
        let mut chain = Chain::new();
        for (i, &l) in ls.iter().enumerate() {
            chain = chain.push(block(&c.oracles[0], chain.tip_digest(), &format!("b{i}"), l, None));
        }
        let expected: f64 = ls.iter().sum();
        prop_assert_eq!(chain.luck(), expected);
        prop_assert!(valid(&chain, &c.registry, &luck_measurement()));
        let decoded = Chain::<Block>::decode(&chain.encode()).unwrap();
        prop_assert_eq!(decoded.tip_digest(), chain.tip_digest());
        prop_assert_eq!(decoded.encode(), chain.encode());
    }

    #[test]
    fn merge_ignores_input_order_and_contains_forgers(
        honest in proptest::collection::vec(0.0f64..0.99, 3..6),
        m in 2usize..4,
        rotate in 0usize..8,
    ) {
        prop_assume!(m <= honest.len());
        let c = cpus(honest.len() as u64 + 1);
        let parent = Digest::tagged(b"prop", &[b"parent"]);
        let forger = honest.len();
        let mut cands: Vec<Block> = honest
            .iter()
            .enumerate()
            .map(|(i, &l)| block(&c.oracles[i], parent, &format!("h{i}"), l, Some(&parent.0)))
            .collect();
        cands.push(block(&c.oracles[forger], parent, "f1", 0.999999, Some(&parent.0)));
        cands.push(block(&c.oracles[forger], parent, "f2", 0.999998, Some(&parent.0)));
        let a = merge_luckiest(&cands, m).unwrap();
        let mut shuffled = cands.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let b = merge_luckiest(&shuffled, m).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        // One compromised CPU contributes one proof, so l_m is an honest draw.
        let mut sorted = honest.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        prop_assert_eq!(superblock_luck(&a), sorted[m - 2]);
    }

    #[test]
    fn mgf_monotone(n in 1u32..30, s in 0.01f64..5.0, ds in 0.01f64..2.0) {
        prop_assert!(mgf_max_uniform(n, s + ds) > mgf_max_uniform(n, s));
        prop_assert!(mgf_max_uniform(n + 1, s) > mgf_max_uniform(n, s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn simulation_is_a_function_of_the_seed(seed in any::<u64>(), count in 2usize..6) {
        let s = Scenario::honest(count, 3, seed);
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        prop_assert_eq!(a.trace.digest, b.trace.digest);
        prop_assert!(a.trace.honest_converged());
        let acc = &a.trace.accounting;
        prop_assert_eq!(acc.sent, acc.delivered + acc.dropped + acc.ignored);
    }
}

#[test]
fn persistence_decays_with_depth() {
    let at = |h| {
        mc_persistence(&PersistenceQuery { majority: 60, minority: 40, h, trials: 20_000, seed: 4 })
            .unwrap()
            .p_hat
    };
    assert!(at(20) < at(5));
}

#[test]
fn tee_draws_pass_dkw() {
    let mut registry = VendorRegistry::new();
    let clock = SimClock::new();
    let cpu = Cpu::create(99, 0, &mut registry, &clock).unwrap();
    let enclave = cpu.start_enclave(luck_measurement());
    let n = 100_000;
    let mut draws: Vec<f64> = (0..n).map(|_| enclave.random_draw()).collect();
    draws.sort_by(f64::total_cmp);
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - x).abs()))
        .fold(0.0, f64::max);
    // DKW at 95%: eps = sqrt(ln(2/0.05) / (2n)).
    let eps = ((2.0f64 / 0.05).ln() / (2.0 * n as f64)).sqrt();
    assert!(eps < 0.0044);
    assert!(d <= eps, "sup |F_n - F| = {d}");
}
