#![allow(dead_code)]

use std::path::{Path, PathBuf};

use ctxsql_core::llm::MockScript;
use rusqlite::Connection;
use serde_json::json;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

/// Two small SQLite databases in SParC layout plus dev/train splits.
pub struct World {
    pub dir: TempDir,
    pub tables: PathBuf,
    pub db_dir: PathBuf,
    pub dev: PathBuf,
    pub train: PathBuf,
    /// (db_id, [(question, gold_sql)]) per dev interaction.
    pub dev_turns: Vec<(String, Vec<(String, String)>)>,
}

impl World {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn db_file(&self, db_id: &str) -> PathBuf {
        self.db_dir.join(db_id).join(format!("{db_id}.sqlite"))
    }

    pub fn turn_count(&self) -> usize {
        self.dev_turns.iter().map(|(_, t)| t.len()).sum()
    }

    /// Mock script answering each dev question with its gold SQL.
    pub fn gold_echo_script(&self) -> MockScript {
        self.dev_turns
            .iter()
            .flat_map(|(_, turns)| turns.iter())
            .fold(MockScript::default(), |s, (q, sql)| s.rule(q.clone(), format!("```sql\n{sql}\n```")))
    }

    pub fn write_gold_echo_script(&self) -> PathBuf {
        let p = self.path("gold_echo.json");
        std::fs::write(&p, serde_json::to_string_pretty(&self.gold_echo_script()).unwrap()).unwrap();
        p
    }
}

fn school_db(path: &Path) {
    let conn = Connection::open(path).unwrap();
    conn.execute_batch(
        "CREATE TABLE dorm (dormid INTEGER PRIMARY KEY, dorm_name TEXT, capacity INTEGER);
         CREATE TABLE student (StuID INTEGER PRIMARY KEY, Fname TEXT, LName TEXT, Age INTEGER,
                               dormid INTEGER REFERENCES dorm(dormid));
         INSERT INTO dorm VALUES (1, 'Anonymous Donor Hall', 128), (2, 'Bud Jones Hall', 85), (3, 'Fawlty Towers', 355);",
    )
    .unwrap();
    let first = ["Linda", "Tracy", "Shiela", "Dinesh", "Paul", "Andy", "Lisa", "Jandy", "Eric", "Derek", "David", "Steven"];
    let last = ["Smith", "Kim", "Jones", "Kumar", "Gompers", "Schultz", "Apap", "Nelson", "Tai", "Lee", "Adams", "Davis"];
    for i in 0..12 {
        conn.execute(
            "INSERT INTO student VALUES (?1, ?2, ?3, ?4, ?5)",
            rusqlite::params![1001 + i, first[i as usize], last[i as usize], 18 + i, 1 + i % 3],
        )
        .unwrap();
    }
}

fn shop_db(path: &Path) {
    let conn = Connection::open(path).unwrap();
    conn.execute_batch(
        "CREATE TABLE product (pid INTEGER PRIMARY KEY, name TEXT, price REAL);
         CREATE TABLE purchase (oid INTEGER PRIMARY KEY, pid INTEGER REFERENCES product(pid), qty INTEGER);",
    )
    .unwrap();
    for i in 0..8 {
        conn.execute(
            "INSERT INTO product VALUES (?1, ?2, ?3)",
            rusqlite::params![i + 1, format!("item{i}"), 5.0 * (i + 1) as f64],
        )
        .unwrap();
    }
    for i in 0..20 {
        conn.execute("INSERT INTO purchase VALUES (?1, ?2, ?3)", rusqlite::params![i + 1, 1 + i % 8, 1 + i % 4])
            .unwrap();
    }
}

fn tables_json() -> serde_json::Value {
    json!([
        {
            "db_id": "school",
            "table_names_original": ["dorm", "student"],
            "table_names": ["dorm", "student"],
            "column_names_original": [[-1, "*"], [0, "dormid"], [0, "dorm_name"], [0, "capacity"],
                                      [1, "StuID"], [1, "Fname"], [1, "LName"], [1, "Age"], [1, "dormid"]],
            "column_names": [[-1, "*"], [0, "dorm id"], [0, "dorm name"], [0, "capacity"],
                             [1, "stu id"], [1, "first name"], [1, "last name"], [1, "age"], [1, "dorm id"]],
            "column_types": ["text", "number", "text", "number", "number", "text", "text", "number", "number"],
            "primary_keys": [1, 4],
            "foreign_keys": [[8, 1]]
        },
        {
            "db_id": "shop",
            "table_names_original": ["product", "purchase"],
            "table_names": ["product", "purchase"],
            "column_names_original": [[-1, "*"], [0, "pid"], [0, "name"], [0, "price"],
                                      [1, "oid"], [1, "pid"], [1, "qty"]],
            "column_names": [[-1, "*"], [0, "pid"], [0, "name"], [0, "price"],
                             [1, "oid"], [1, "pid"], [1, "qty"]],
            "column_types": ["text", "number", "text", "number", "number", "number", "number"],
            "primary_keys": [1, 4],
            "foreign_keys": [[5, 1]]
        }
    ])
}

fn school_turns(a: usize, n: usize) -> Vec<(String, String)> {
    vec![
        (format!("How many students are older than {a}?"), format!("SELECT count(*) FROM student WHERE Age > {a}")),
        (format!("List the first names of those older than {a}."), format!("SELECT Fname FROM student WHERE Age > {a}")),
        (
            format!("Sort those {a}+ students by last name, descending."),
            format!("SELECT Fname FROM student WHERE Age > {a} ORDER BY LName DESC"),
        ),
        (
            format!("Which dorms house anyone above age {a}?"),
            format!("SELECT DISTINCT T2.dorm_name FROM student AS T1 JOIN dorm AS T2 ON T1.dormid = T2.dormid WHERE T1.Age > {a}"),
        ),
    ]
    .into_iter()
    .take(n)
    .collect()
}

fn shop_turns(p: usize, n: usize) -> Vec<(String, String)> {
    vec![
        (format!("Which products cost more than {p} dollars?"), format!("SELECT name FROM product WHERE price > {p}")),
        (format!("What is the average price above {p}?"), format!("SELECT avg(price) FROM product WHERE price > {p}")),
        (
            format!("Total quantity bought of items over {p} dollars?"),
            format!("SELECT sum(T2.qty) FROM product AS T1 JOIN purchase AS T2 ON T1.pid = T2.pid WHERE T1.price > {p}"),
        ),
    ]
    .into_iter()
    .take(n)
    .collect()
}

fn sparc(items: &[(String, Vec<(String, String)>)], prefix: &str) -> serde_json::Value {
    serde_json::Value::Array(
        items
            .iter()
            .enumerate()
            .map(|(i, (db, turns))| {
                json!({
                    "database_id": db,
                    "interaction_id": format!("{prefix}{i}"),
                    "interaction": turns.iter().map(|(q, s)| json!({"utterance": q, "query": s})).collect::<Vec<_>>(),
                })
            })
            .collect(),
    )
}

pub fn build_world() -> World {
    let dir = TempDir::new().unwrap();
    let db_dir = dir.path().join("database");
    for (id, f) in [("school", school_db as fn(&Path)), ("shop", shop_db)] {
        std::fs::create_dir_all(db_dir.join(id)).unwrap();
        f(&db_dir.join(id).join(format!("{id}.sqlite")));
    }
    let tables = dir.path().join("tables.json");
    std::fs::write(&tables, serde_json::to_string_pretty(&tables_json()).unwrap()).unwrap();

    let dev_turns: Vec<(String, Vec<(String, String)>)> = (0..10)
        .map(|k| {
            if k % 2 == 0 {
                ("school".to_string(), school_turns(17 + k, 2 + k % 3))
            } else {
                ("shop".to_string(), shop_turns(4 + 3 * k, 1 + k % 3))
            }
        })
        .collect();
    let train_turns: Vec<(String, Vec<(String, String)>)> = (0..8)
        .map(|k| {
            if k % 2 == 0 {
                ("school".to_string(), school_turns(30 + k, 4))
            } else {
                ("shop".to_string(), shop_turns(50 + k, 3))
            }
        })
        .collect();
    let dev = dir.path().join("dev.json");
    let train = dir.path().join("train.json");
    std::fs::write(&dev, serde_json::to_string_pretty(&sparc(&dev_turns, "dev")).unwrap()).unwrap();
    std::fs::write(&train, serde_json::to_string_pretty(&sparc(&train_turns, "train")).unwrap()).unwrap();
    World { dir, tables, db_dir, dev, train, dev_turns }
}

pub fn sha256_file(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}
