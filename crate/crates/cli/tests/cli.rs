//! End-to-end checks of the `twc` binary: exit codes, determinism, and
//! agreement between reported statistics and direct library computation.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;
use twcircuit::circuit::parse_circuit;
use twcircuit::gen::{gen_graph_with_td, gen_instance, GenConfig, Shape};
use twcircuit::reach::bfs_oracle;
use twcircuit::td::{serialize_gr, serialize_td};

fn twc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn gen_is_deterministic_under_seed() {
    let dir = tempdir().unwrap();
    let args = [
        "gen", "--gates", "30", "--k", "3", "--seed", "7", "--out-circuit", "a.ckt",
        "--out-td", "a.td",
    ];
    let first = twc(&args, dir.path());
    assert_eq!(code(&first), 0);
    assert_eq!(String::from_utf8_lossy(&first.stdout), "# seed 7\n");
    let a_ckt = fs::read(dir.path().join("a.ckt")).unwrap();
    let a_td = fs::read(dir.path().join("a.td")).unwrap();
    let again = twc(
        &[
            "gen", "--gates", "30", "--k", "3", "--seed", "7", "--out-circuit", "b.ckt",
            "--out-td", "b.td",
        ],
        dir.path(),
    );
    assert_eq!(code(&again), 0);
    assert_eq!(a_ckt, fs::read(dir.path().join("b.ckt")).unwrap());
    assert_eq!(a_td, fs::read(dir.path().join("b.td")).unwrap());
}

#[test]
fn equiv_decides_with_exit_codes() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("a.ckt"), "input x\ninput y\ngate g add x y\noutput g\n")
        .unwrap();
    fs::write(dir.path().join("b.ckt"), "input x\ninput y\ngate g mul x y\noutput g\n")
        .unwrap();
    assert_eq!(code(&twc(&["equiv", "a.ckt", "a.ckt"], dir.path())), 0);
    assert_eq!(code(&twc(&["equiv", "a.ckt", "b.ckt"], dir.path())), 1);
    assert_eq!(code(&twc(&["equiv", "a.ckt", "missing.ckt"], dir.path())), 2);
    let random = twc(
        &["equiv", "a.ckt", "b.ckt", "--method", "random", "--seed", "5"],
        dir.path(),
    );
    assert_eq!(code(&random), 1);
}

#[test]
fn flatten_output_is_equivalent_to_the_input() {
    let dir = tempdir().unwrap();
    let gen = twc(
        &[
            "gen", "--gates", "24", "--k", "3", "--shape", "md", "--seed", "41",
            "--out-circuit", "c.ckt", "--out-td", "c.td",
        ],
        dir.path(),
    );
    assert_eq!(code(&gen), 0);
    let flat = twc(
        &["flatten", "c.ckt", "c.td", "--mode", "md", "-o", "f.ckt"],
        dir.path(),
    );
    assert_eq!(code(&flat), 0, "{}", String::from_utf8_lossy(&flat.stderr));
    assert_eq!(code(&twc(&["equiv", "c.ckt", "f.ckt"], dir.path())), 0);
    // The flattened file parses into a leaf-shared tree: brent accepts it.
    let brent = twc(&["brent", "f.ckt", "-o", "fb.ckt"], dir.path());
    assert_eq!(code(&brent), 0, "{}", String::from_utf8_lossy(&brent.stderr));
    assert_eq!(code(&twc(&["equiv", "f.ckt", "fb.ckt"], dir.path())), 0);
}

#[test]
fn stats_matches_direct_library_recomputation() {
    let dir = tempdir().unwrap();
    for seed in 0..100u64 {
        let shape = [Shape::Arith, Shape::Md, Shape::Sm, Shape::Bool][(seed % 4) as usize];
        let cfg = GenConfig::new(12 + (seed % 20) as usize, 1 + (seed % 4) as usize, shape, seed);
        let (c, td) = gen_instance(&cfg);
        let ckt = dir.path().join("s.ckt");
        let tdp = dir.path().join("s.td");
        fs::write(&ckt, twcircuit::circuit::serialize_circuit(&c).unwrap()).unwrap();
        fs::write(&tdp, serialize_td(&td)).unwrap();
        let out = twc(&["stats", "s.ckt", "s.td", "--json"], dir.path());
        assert_eq!(code(&out), 0);
        let v: serde_json::Value =
            serde_json::from_slice(&out.stdout).expect("stats emits valid JSON");
        // Compare against the circuit as the CLI sees it (the text format
        // merges duplicate variable leaves).
        let seen = parse_circuit(&fs::read_to_string(&ckt).unwrap()).unwrap();
        assert_eq!(v["size_ops"], seen.size_ops(), "seed {seed}");
        assert_eq!(v["size_total"], seen.size_total(), "seed {seed}");
        assert_eq!(v["depth"], seen.depth(), "seed {seed}");
        assert_eq!(v["formal_degree"], u64::try_from(seen.formal_degree()).unwrap());
        assert_eq!(v["mult_chain_length"], seen.mult_chain_length(), "seed {seed}");
        assert_eq!(v["is_md"], seen.is_multiplicatively_disjoint(), "seed {seed}");
        assert_eq!(v["is_sm"], seen.is_syntactically_multilinear(), "seed {seed}");
        assert_eq!(v["td_width"], td.width(), "seed {seed}");
        assert_eq!(v["td_depth"], td.depth(), "seed {seed}");
    }
}

#[test]
fn reach_exit_codes_follow_the_oracle() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("g.gr"), "p tw 3 2\n1 2\n2 3\n").unwrap();
    fs::write(dir.path().join("g.td"), "s td 2 2 3\nb 1 1 2\nb 2 2 3\n1 2\n").unwrap();
    assert_eq!(code(&twc(&["reach", "g.gr", "g.td", "1", "3"], dir.path())), 0);
    assert_eq!(code(&twc(&["reach", "g.gr", "g.td", "3", "1"], dir.path())), 1);
    assert_eq!(code(&twc(&["reach", "g.gr", "g.td", "2", "2"], dir.path())), 0);
    assert_eq!(code(&twc(&["reach", "g.gr", "g.td", "1", "9"], dir.path())), 2);
    let tele = twc(&["reach", "g.gr", "g.td", "1", "3", "--telemetry"], dir.path());
    let line = String::from_utf8_lossy(&tele.stdout);
    let json_line = line.lines().next().unwrap();
    let v: serde_json::Value = serde_json::from_str(json_line).expect("telemetry is JSON");
    assert!(v["max_frame_coefficient_bits"].as_u64().unwrap() <= v["budget_max_monomials"].as_u64().unwrap());

    // Random digraphs: the exit code equals the oracle's verdict.
    for seed in 0..20u64 {
        let (g, td) = gen_graph_with_td(9, 3, 0.6, true, 500 + seed);
        fs::write(dir.path().join("r.gr"), serialize_gr(&g)).unwrap();
        fs::write(dir.path().join("r.td"), serialize_td(&td)).unwrap();
        let s = 1 + (seed % 9) as u32;
        let t = 1 + ((seed * 7 + 3) % 9) as u32;
        let expect = if bfs_oracle(&g, s, t) { 0 } else { 1 };
        let out = twc(
            &["reach", "r.gr", "r.td", &s.to_string(), &t.to_string()],
            dir.path(),
        );
        assert_eq!(code(&out), expect, "seed {seed}, s={s} t={t}");
    }
}

#[test]
fn validate_accepts_good_pairs_and_rejects_bad_ones() {
    let dir = tempdir().unwrap();
    fs::write(dir.path().join("c.ckt"), "input x\ngate g add x x\noutput g\n").unwrap();
    fs::write(dir.path().join("good.td"), "s td 1 2 2\nb 1 1 2\n").unwrap();
    fs::write(dir.path().join("bad.td"), "s td 1 1 2\nb 1 1\n").unwrap();
    assert_eq!(code(&twc(&["validate", "c.ckt", "good.td"], dir.path())), 0);
    assert_eq!(code(&twc(&["validate", "c.ckt", "bad.td"], dir.path())), 2);
    fs::write(dir.path().join("junk.ckt"), "not a circuit\n").unwrap();
    assert_eq!(code(&twc(&["validate", "junk.ckt"], dir.path())), 2);
}

#[test]
fn width_sim_emits_an_equivalent_leveled_circuit() {
    let dir = tempdir().unwrap();
    let gen = twc(
        &[
            "gen", "--gates", "22", "--k", "3", "--seed", "13", "--out-circuit", "c.ckt",
            "--out-td", "c.td",
        ],
        dir.path(),
    );
    assert_eq!(code(&gen), 0);
    let sim = twc(
        &["width-sim", "c.ckt", "c.td", "--json", "-o", "w.ckt"],
        dir.path(),
    );
    assert_eq!(code(&sim), 0, "{}", String::from_utf8_lossy(&sim.stderr));
    let v: serde_json::Value = serde_json::from_slice(&sim.stdout).unwrap();
    assert!(v["width"].as_u64().unwrap() >= 1);
    assert!(v["size_total"].as_u64().unwrap() >= 1);
    assert_eq!(code(&twc(&["equiv", "c.ckt", "w.ckt"], dir.path())), 0);
}

#[test]
fn boolean_pipeline_runs_through_arith_and_dearith() {
    let dir = tempdir().unwrap();
    let gen = twc(
        &[
            "gen", "--gates", "16", "--k", "3", "--shape", "bool", "--seed", "29",
            "--out-circuit", "b.ckt", "--out-td", "b.td",
        ],
        dir.path(),
    );
    assert_eq!(code(&gen), 0);
    let arith = twc(
        &["arith", "b.ckt", "b.td", "--out-circuit", "a.ckt", "--out-td", "a.td"],
        dir.path(),
    );
    assert_eq!(code(&arith), 0, "{}", String::from_utf8_lossy(&arith.stderr));
    let flat = twc(
        &["flatten", "a.ckt", "a.td", "--mode", "gf2", "-o", "f.ckt"],
        dir.path(),
    );
    assert_eq!(code(&flat), 0, "{}", String::from_utf8_lossy(&flat.stderr));
    let de = twc(&["dearith", "f.ckt", "-o", "d.ckt"], dir.path());
    assert_eq!(code(&de), 0, "{}", String::from_utf8_lossy(&de.stderr));
}
